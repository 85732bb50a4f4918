//! The uniform layer blocks the router wires together.
//!
//! All blocks share one signature: `[batch, seq, d] -> [batch, seq, d]`
//! (embeddings map token ids into that space, output heads map out of it).
//! Uniform shapes are what make arbitrary routing possible at all.
//!
//! A block that participates in routing carries a [`RoutingHead`]: a small
//! affine map from the block's last-position hidden vector to one logit per
//! routable slot. Dividing logits by a temperature `alpha` before the
//! sigmoid sharpens connection weights toward 0/1 as `alpha` shrinks.
//!
//! Blocks hold [`TensorId`]s into a [`Graph`] rather than raw buffers; the
//! graph owns all parameter storage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, TensorId};

/// Dimensions shared by every block in a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    /// Model width: hidden size of every slot.
    pub d: usize,
    /// Inner width of feed-forward layers.
    pub ff: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Maximum sequence length (positional table size).
    pub seq: usize,
    /// Vocabulary size for embeddings and token heads.
    pub vocab: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.d, self.ff, self.heads, self.seq, self.vocab]
            .iter()
            .all(|&v| v > 0);
        if !all_positive {
            return Err(Error::Contract {
                op: "BlockConfig",
                detail: "all dimensions must be positive".into(),
            });
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Contract {
                op: "BlockConfig",
                detail: format!("heads ({}) must divide width d ({})", self.heads, self.d),
            });
        }
        Ok(())
    }
}

/// The kinds of block a model can be assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockKind {
    #[serde(rename = "transformer")]
    Transformer,
    #[serde(rename = "feedforward")]
    FeedForward,
    #[serde(rename = "input-embedding")]
    InputEmbedding,
    #[serde(rename = "output-head")]
    OutputHead,
}

/// Uniform-bound initialization with limit sqrt(6 / (fan_in + fan_out)).
fn xavier<R: Real>(g: &mut Graph<R>, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<TensorId> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<R> = (0..rows * cols)
        .map(|_| R::from_f64(rng.random_range(-limit..limit)))
        .collect();
    g.param(data, vec![rows, cols])
}

fn zeros_param<R: Real>(g: &mut Graph<R>, shape: Vec<usize>) -> Result<TensorId> {
    let n: usize = shape.iter().product();
    g.param(vec![R::zero(); n], shape)
}

fn ones_param<R: Real>(g: &mut Graph<R>, shape: Vec<usize>) -> Result<TensorId> {
    let n: usize = shape.iter().product();
    g.param(vec![R::one(); n], shape)
}

/// Small uniform initialization for embedding-like tables.
fn table_init<R: Real>(
    g: &mut Graph<R>,
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Result<TensorId> {
    let data: Vec<R> = (0..rows * cols)
        .map(|_| R::from_f64(rng.random_range(-scale..scale)))
        .collect();
    g.param(data, vec![rows, cols])
}

/// Affine map with weight `[fan_in, fan_out]` and bias `[fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: TensorId,
    pub b: TensorId,
}

impl Linear {
    fn new<R: Real>(g: &mut Graph<R>, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            w: xavier(g, rng, fan_in, fan_out)?,
            b: zeros_param(g, vec![fan_out])?,
        })
    }

    fn apply<R: Real>(&self, g: &mut Graph<R>, x: TensorId) -> Result<TensorId> {
        let y = g.matmul(x, self.w)?;
        g.add(y, self.b)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        out.push((format!("{prefix}.w"), self.w));
        out.push((format!("{prefix}.b"), self.b));
    }
}

/// Pre-norm multi-head self-attention followed by a pre-norm feed-forward,
/// both with residual connections. `causal` masks attention to earlier
/// positions for next-token tasks.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    d: usize,
    heads: usize,
    causal: bool,
    ln1_g: TensorId,
    ln1_b: TensorId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2_g: TensorId,
    ln2_b: TensorId,
    up: Linear,
    down: Linear,
}

impl TransformerBlock {
    pub fn new<R: Real>(
        g: &mut Graph<R>,
        cfg: &BlockConfig,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(TransformerBlock {
            d: cfg.d,
            heads: cfg.heads,
            causal,
            ln1_g: ones_param(g, vec![cfg.d])?,
            ln1_b: zeros_param(g, vec![cfg.d])?,
            q: Linear::new(g, rng, cfg.d, cfg.d)?,
            k: Linear::new(g, rng, cfg.d, cfg.d)?,
            v: Linear::new(g, rng, cfg.d, cfg.d)?,
            o: Linear::new(g, rng, cfg.d, cfg.d)?,
            ln2_g: ones_param(g, vec![cfg.d])?,
            ln2_b: zeros_param(g, vec![cfg.d])?,
            up: Linear::new(g, rng, cfg.d, cfg.ff)?,
            down: Linear::new(g, rng, cfg.ff, cfg.d)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: TensorId) -> Result<TensorId> {
        let shape = g.shape(x)?.to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::BadShape {
                op: "transformer",
                shape,
                detail: format!("expected (batch, seq, {})", self.d),
            });
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let hd = d / self.heads;

        let h = g.layer_norm(x, self.ln1_g, self.ln1_b)?;
        let q = self.q.apply(g, h)?;
        let q = self.split_heads(g, q, b, s, hd)?;
        let k = self.k.apply(g, h)?;
        let k = self.split_heads(g, k, b, s, hd)?;
        let v = self.v.apply(g, h)?;
        let v = self.split_heads(g, v, b, s, hd)?;

        let kt = g.swap_axes(k, 2, 3)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, R::from_f64(1.0 / (hd as f64).sqrt()))?;
        let scores = if self.causal {
            // Disallowed positions get a large negative logit; after the
            // row max subtraction inside softmax they underflow to zero.
            let mut mask = vec![R::zero(); s * s];
            for i in 0..s {
                for j in (i + 1)..s {
                    mask[i * s + j] = R::from_f64(-1e9);
                }
            }
            let mask = g.constant(mask, vec![s, s])?;
            g.add(scores, mask)?
        } else {
            scores
        };
        let att = g.softmax(scores, 3)?;
        let ctx = g.matmul(att, v)?;
        let merged = g.swap_axes(ctx, 1, 2)?;
        let merged = g.reshape(merged, vec![b, s, d])?;
        let proj = self.o.apply(g, merged)?;
        let x = g.add(x, proj)?;

        let h2 = g.layer_norm(x, self.ln2_g, self.ln2_b)?;
        let mid = self.up.apply(g, h2)?;
        let mid = g.relu(mid)?;
        let ffo = self.down.apply(g, mid)?;
        g.add(x, ffo)
    }

    fn split_heads<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: TensorId,
        b: usize,
        s: usize,
        hd: usize,
    ) -> Result<TensorId> {
        let x = g.reshape(x, vec![b, s, self.heads, hd])?;
        g.swap_axes(x, 1, 2)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        out.push((format!("{prefix}.ln1.g"), self.ln1_g));
        out.push((format!("{prefix}.ln1.b"), self.ln1_b));
        self.q.params(&format!("{prefix}.attn.q"), out);
        self.k.params(&format!("{prefix}.attn.k"), out);
        self.v.params(&format!("{prefix}.attn.v"), out);
        self.o.params(&format!("{prefix}.attn.o"), out);
        out.push((format!("{prefix}.ln2.g"), self.ln2_g));
        out.push((format!("{prefix}.ln2.b"), self.ln2_b));
        self.up.params(&format!("{prefix}.ff.up"), out);
        self.down.params(&format!("{prefix}.ff.down"), out);
    }
}

/// Position-wise two-layer MLP with a pre-norm residual connection.
#[derive(Clone, Debug)]
pub struct FeedForwardBlock {
    d: usize,
    ln_g: TensorId,
    ln_b: TensorId,
    up: Linear,
    down: Linear,
}

impl FeedForwardBlock {
    pub fn new<R: Real>(g: &mut Graph<R>, cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(FeedForwardBlock {
            d: cfg.d,
            ln_g: ones_param(g, vec![cfg.d])?,
            ln_b: zeros_param(g, vec![cfg.d])?,
            up: Linear::new(g, rng, cfg.d, cfg.ff)?,
            down: Linear::new(g, rng, cfg.ff, cfg.d)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: TensorId) -> Result<TensorId> {
        let shape = g.shape(x)?.to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::BadShape {
                op: "feedforward",
                shape,
                detail: format!("expected (batch, seq, {})", self.d),
            });
        }
        let h = g.layer_norm(x, self.ln_g, self.ln_b)?;
        let mid = self.up.apply(g, h)?;
        let mid = g.relu(mid)?;
        let out = self.down.apply(g, mid)?;
        g.add(x, out)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        out.push((format!("{prefix}.ln.g"), self.ln_g));
        out.push((format!("{prefix}.ln.b"), self.ln_b));
        self.up.params(&format!("{prefix}.up"), out);
        self.down.params(&format!("{prefix}.down"), out);
    }
}

/// A hidden slot's computation: either a full transformer block or a
/// cheaper feed-forward block.
#[derive(Clone, Debug)]
pub enum HiddenBlock {
    Transformer(TransformerBlock),
    FeedForward(FeedForwardBlock),
}

impl HiddenBlock {
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: TensorId) -> Result<TensorId> {
        match self {
            HiddenBlock::Transformer(t) => t.forward(g, x),
            HiddenBlock::FeedForward(f) => f.forward(g, x),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        match self {
            HiddenBlock::Transformer(t) => t.params(prefix, out),
            HiddenBlock::FeedForward(f) => f.params(prefix, out),
        }
    }
}

/// Token plus learned positional embedding: ids `[b, s]` to `[b, s, d]`.
#[derive(Clone, Debug)]
pub struct InputEmbedding {
    seq: usize,
    tokens: TensorId,
    positions: TensorId,
}

impl InputEmbedding {
    pub fn new<R: Real>(g: &mut Graph<R>, cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(InputEmbedding {
            seq: cfg.seq,
            tokens: table_init(g, rng, cfg.vocab, cfg.d, 0.02)?,
            positions: table_init(g, rng, cfg.seq, cfg.d, 0.02)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ids: &[u32], batch: usize, seq: usize) -> Result<TensorId> {
        if seq > self.seq {
            return Err(Error::Contract {
                op: "input_embedding",
                detail: format!("sequence length {seq} exceeds configured maximum {}", self.seq),
            });
        }
        let emb = g.embedding(self.tokens, ids, batch, seq)?;
        let pos = g.first_rows(self.positions, seq)?;
        // [s, d] is a suffix of [b, s, d]: one positional table serves the
        // whole batch.
        let pos = g.reshape(pos, vec![seq, g.shape(emb)?[2]])?;
        g.add(emb, pos)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        out.push((format!("{prefix}.tok"), self.tokens));
        out.push((format!("{prefix}.pos"), self.positions));
    }
}

/// What an output head produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Per-position token logits `[b, s, vocab]` for next-token tasks.
    TokenLogits,
    /// Class logits `[b, classes]` read from the final position.
    LastPositionClasses,
}

/// Affine projection out of model space, once per forward pass.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub mode: HeadMode,
    proj: Linear,
}

impl OutputHead {
    pub fn new<R: Real>(
        g: &mut Graph<R>,
        d: usize,
        out_dim: usize,
        mode: HeadMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(OutputHead {
            mode,
            proj: Linear::new(g, rng, d, out_dim)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: TensorId) -> Result<TensorId> {
        match self.mode {
            HeadMode::TokenLogits => self.proj.apply(g, x),
            HeadMode::LastPositionClasses => {
                let last = g.last_position(x)?;
                self.proj.apply(g, last)
            }
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        self.proj.params(prefix, out);
    }
}

/// Produces one connection weight per routable slot from a block's routing
/// signal. Weights and bias start at zero so every connection begins at the
/// unbiased value 0.5.
#[derive(Clone, Debug)]
pub struct RoutingHead {
    pub w: TensorId,
    pub b: TensorId,
}

impl RoutingHead {
    pub fn new<R: Real>(g: &mut Graph<R>, d: usize, slots: usize) -> Result<Self> {
        Ok(RoutingHead {
            w: zeros_param(g, vec![d, slots])?,
            b: zeros_param(g, vec![slots])?,
        })
    }

    /// Connection weights `sigmoid(logits / alpha)` for signal `[b, d]`.
    pub fn connections<R: Real>(&self, g: &mut Graph<R>, signal: TensorId, alpha: f64) -> Result<TensorId> {
        if alpha <= 0.0 || alpha.is_nan() {
            return Err(Error::Contract {
                op: "routing_head",
                detail: format!("alpha must be positive, got {alpha}"),
            });
        }
        let logits = g.matmul(signal, self.w)?;
        let logits = g.add(logits, self.b)?;
        let scaled = g.scale(logits, R::from_f64(1.0 / alpha))?;
        g.sigmoid(scaled)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        out.push((format!("{prefix}.w"), self.w));
        out.push((format!("{prefix}.b"), self.b));
    }
}

/// The routing signal of a block output: its last-position hidden vector.
pub fn routing_signal<R: Real>(g: &mut Graph<R>, h: TensorId) -> Result<TensorId> {
    g.last_position(h)
}

/// Run a block and derive its connection weights in one step: the weights
/// are computed from the block's own output (before any iteration embedding
/// is added to it).
pub fn with_connection<R: Real>(
    g: &mut Graph<R>,
    block: &HiddenBlock,
    head: &RoutingHead,
    x: TensorId,
    alpha: f64,
) -> Result<(TensorId, TensorId)> {
    let out = block.forward(g, x)?;
    let signal = routing_signal(g, out)?;
    let con = head.connections(g, signal, alpha)?;
    Ok((out, con))
}
