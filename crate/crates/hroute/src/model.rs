//! The routed meta-architecture and its sequential baseline.
//!
//! An [`HModel`] owns a pool of layers split into three roles: input layers
//! that embed tokens, hidden layers that transform state, and output layers
//! that produce logits. Instead of a fixed wiring, every input and hidden
//! layer ends in a routing head that emits one weight per target slot, and
//! the network's state is rebuilt from those weighted contributions at each
//! step.
//!
//! There are `slots = hidden + outputs` target slots. Slot `i < hidden`
//! feeds hidden layer `i` on the next iteration; the trailing `outputs`
//! slots accumulate into the output layers. A forward pass runs the input
//! stage once, then `iterations` routed iterations, averages the output
//! slots over the iteration count, and applies the output layers once.
//!
//! Routing weights come from a sigmoid with a temperature that decays
//! geometrically per iteration, so late iterations commit harder to a
//! wiring. At inference time the weight vectors can be sparsified to their
//! top-k entries. A [`RoutingPlan`] overrides the learned weights with
//! fixed ones, which pins the model to a chosen wiring (used by tests and
//! the sequential-equivalence check).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    routing_signal, BlockConfig, BlockKind, FeedForwardBlock, HeadMode, HiddenBlock,
    InputEmbedding, OutputHead, RoutingHead, TransformerBlock,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, TensorId};

/// One batch of token ids, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Contract {
                op: "token_batch",
                detail: format!("{} ids do not fill batch {batch} x seq {seq}", ids.len()),
            });
        }
        Ok(Self { ids, batch, seq })
    }
}

/// Forward-pass mode. Top-k sparsification only applies at inference;
/// training always sees dense routing weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Shape and routing hyperparameters of an [`HModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct HModelConfig {
    /// Input layers (token embedders), each fed one token batch.
    pub inputs: usize,
    /// Hidden layers; each owns one state slot.
    pub hidden: usize,
    /// Output layers; their slots accumulate across iterations.
    pub outputs: usize,
    /// Routed iterations after the input stage.
    pub iterations: usize,
    /// Dimensions shared by every layer in the pool.
    pub block: BlockConfig,
    /// Starting routing temperature; higher means softer weights.
    pub alpha0: f64,
    /// Per-iteration decay factor applied to the temperature.
    pub alpha_rate: f64,
    /// Inference-time sparsification: keep this many weights per vector.
    pub topk: Option<usize>,
}

impl HModelConfig {
    /// Target slots: one per hidden layer plus one per output layer.
    pub fn slots(&self) -> usize {
        self.hidden + self.outputs
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        let fail = |detail: String| Err(Error::Contract { op: "model_config", detail });
        if self.inputs == 0 {
            return fail("at least one input layer is required".into());
        }
        if self.outputs == 0 {
            return fail("at least one output layer is required".into());
        }
        if self.alpha0 <= 0.0 || !self.alpha0.is_finite() {
            return fail(format!("alpha0 must be positive and finite, got {}", self.alpha0));
        }
        if self.alpha_rate <= 0.0 || !self.alpha_rate.is_finite() {
            return fail(format!("alpha_rate must be positive and finite, got {}", self.alpha_rate));
        }
        if let Some(k) = self.topk {
            if k == 0 || k > self.slots() {
                return fail(format!("topk {k} outside 1..={}", self.slots()));
            }
        }
        Ok(())
    }

    /// Routing temperature of iteration `j`: `alpha0 * alpha_rate^j`.
    /// The input stage runs at `alpha0`.
    pub fn alpha_at(&self, j: usize) -> Result<f64> {
        if j >= self.iterations.max(1) {
            return Err(Error::IndexOutOfRange {
                op: "alpha_at",
                index: j,
                bound: self.iterations.max(1),
            });
        }
        Ok(self.alpha0 * self.alpha_rate.powi(j as i32))
    }
}

/// State slots after aggregation. `slots[i]` is the `[batch, seq, d]`
/// weighted sum feeding target `i`; `weight_sums[i]` is the `[batch]`
/// total connection weight that went into it.
pub struct StateBundle {
    pub slots: Vec<TensorId>,
    pub weight_sums: Vec<TensorId>,
}

/// Shapes shared by every contribution in one aggregation step.
#[derive(Clone, Copy, Debug)]
pub struct StateDims {
    pub batch: usize,
    pub seq: usize,
    pub d: usize,
    pub slots: usize,
}

/// Build the next state by summing weighted contributions per target slot.
/// Each contribution pairs a `[batch, seq, d]` layer output with its
/// `[batch, slots]` connection weights. An empty contribution list yields
/// all-zero slots.
pub fn aggregate<R: Real>(
    g: &mut Graph<R>,
    contributions: &[(TensorId, TensorId)],
    dims: StateDims,
) -> Result<StateBundle> {
    let state_shape = vec![dims.batch, dims.seq, dims.d];
    let con_shape = vec![dims.batch, dims.slots];
    for &(sub, con) in contributions {
        if g.shape(sub)? != &state_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: g.shape(sub)?.to_vec(),
                rhs: state_shape.clone(),
            });
        }
        if g.shape(con)? != &con_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: g.shape(con)?.to_vec(),
                rhs: con_shape.clone(),
            });
        }
    }

    let mut slots = Vec::with_capacity(dims.slots);
    let mut weight_sums = Vec::with_capacity(dims.slots);
    for j in 0..dims.slots {
        let mut slot: Option<TensorId> = None;
        let mut wsum: Option<TensorId> = None;
        for &(sub, con) in contributions {
            let w = g.slice_column(con, j)?;
            let term = g.gate(sub, w)?;
            slot = Some(match slot {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
            wsum = Some(match wsum {
                None => w,
                Some(acc) => g.add(acc, w)?,
            });
        }
        match (slot, wsum) {
            (Some(s), Some(w)) => {
                slots.push(s);
                weight_sums.push(w);
            }
            _ => {
                let zeros = g.constant(
                    vec![R::zero(); dims.batch * dims.seq * dims.d],
                    state_shape.clone(),
                )?;
                let zero_w = g.constant(vec![R::zero(); dims.batch], vec![dims.batch])?;
                slots.push(zeros);
                weight_sums.push(zero_w);
            }
        }
    }
    Ok(StateBundle { slots, weight_sums })
}

/// Divide each slot by its total incoming weight, clamped below at one.
/// Weak aggregate signals pass through unscaled instead of being blown up.
pub fn norm_by_contributors<R: Real>(g: &mut Graph<R>, bundle: StateBundle) -> Result<StateBundle> {
    let mut slots = Vec::with_capacity(bundle.slots.len());
    for (&slot, &w) in bundle.slots.iter().zip(&bundle.weight_sums) {
        slots.push(g.norm_by_weight(slot, w)?);
    }
    Ok(StateBundle { slots, weight_sums: bundle.weight_sums })
}

/// Fixed connection weights overriding the learned routing heads.
/// `stages[0]` holds one row per input layer; `stages[1 + j]` one row per
/// hidden layer for iteration `j`. Every row has `slots` entries in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingPlan {
    pub stages: Vec<Vec<Vec<f64>>>,
}

impl RoutingPlan {
    /// Plan that threads state through the hidden layers in order: the
    /// input feeds slot 0, hidden layer `j` feeds slot `j + 1`, and the
    /// last hidden layer feeds the first output slot. Requires one input
    /// layer and exactly as many iterations as hidden layers, so every
    /// layer runs once in sequence.
    pub fn chain(cfg: &HModelConfig) -> Result<Self> {
        if cfg.inputs != 1 || cfg.hidden == 0 || cfg.iterations != cfg.hidden {
            return Err(Error::Contract {
                op: "chain_plan",
                detail: format!(
                    "chain needs 1 input, hidden >= 1 and iterations == hidden, got {}/{}/{}",
                    cfg.inputs, cfg.hidden, cfg.iterations
                ),
            });
        }
        let slots = cfg.slots();
        let mut stages = Vec::with_capacity(1 + cfg.iterations);
        let mut input_row = vec![0.0; slots];
        input_row[0] = 1.0;
        stages.push(vec![input_row]);
        for j in 0..cfg.iterations {
            let mut rows = vec![vec![0.0; slots]; cfg.hidden];
            let target = if j + 1 < cfg.hidden { j + 1 } else { cfg.hidden };
            rows[j][target] = 1.0;
            stages.push(rows);
        }
        Ok(Self { stages })
    }

    pub fn validate(&self, cfg: &HModelConfig) -> Result<()> {
        let fail = |detail: String| Err(Error::Contract { op: "routing_plan", detail });
        if self.stages.len() != 1 + cfg.iterations {
            return fail(format!(
                "{} stages for {} iterations (want {})",
                self.stages.len(),
                cfg.iterations,
                1 + cfg.iterations
            ));
        }
        for (s, rows) in self.stages.iter().enumerate() {
            let want = if s == 0 { cfg.inputs } else { cfg.hidden };
            if rows.len() != want {
                return fail(format!("stage {s} has {} rows, want {want}", rows.len()));
            }
            for (r, row) in rows.iter().enumerate() {
                if row.len() != cfg.slots() {
                    return fail(format!(
                        "stage {s} row {r} has {} weights, want {}",
                        row.len(),
                        cfg.slots()
                    ));
                }
                if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                    return fail(format!("stage {s} row {r} has weights outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

struct InputLayer {
    embed: InputEmbedding,
    route: RoutingHead,
}

struct HiddenLayer {
    core: HiddenBlock,
    route: RoutingHead,
}

/// The routed model. Owns its computation graph; every call to
/// [`HModel::forward`] resets the tape back to the parameters, so tensor
/// ids from earlier passes become invalid.
pub struct HModel<R: Real> {
    graph: Graph<R>,
    cfg: HModelConfig,
    inputs: Vec<InputLayer>,
    hidden: Vec<HiddenLayer>,
    outputs: Vec<OutputHead>,
    /// Per-iteration additive embedding, `[iterations, d]`. Absent when
    /// the model runs zero iterations.
    iter_emb: Option<TensorId>,
}

impl<R: Real> HModel<R> {
    /// Build a model with freshly initialized parameters. `hidden_kinds`
    /// picks the architecture of each hidden layer; `head` and `out_dim`
    /// shape every output layer; `causal` masks attention to past
    /// positions.
    pub fn new(
        cfg: HModelConfig,
        hidden_kinds: &[BlockKind],
        head: HeadMode,
        out_dim: usize,
        causal: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if hidden_kinds.len() != cfg.hidden {
            return Err(Error::Contract {
                op: "model_new",
                detail: format!(
                    "{} hidden kinds for {} hidden layers",
                    hidden_kinds.len(),
                    cfg.hidden
                ),
            });
        }
        for kind in hidden_kinds {
            if !matches!(kind, BlockKind::Transformer | BlockKind::FeedForward) {
                return Err(Error::Contract {
                    op: "model_new",
                    detail: format!("{kind:?} cannot serve as a hidden layer"),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let slots = cfg.slots();

        let mut inputs = Vec::with_capacity(cfg.inputs);
        for _ in 0..cfg.inputs {
            let embed = InputEmbedding::new(&mut g, &cfg.block, &mut rng)?;
            let route = RoutingHead::new(&mut g, cfg.block.d, slots)?;
            inputs.push(InputLayer { embed, route });
        }
        let mut hidden = Vec::with_capacity(cfg.hidden);
        for kind in hidden_kinds {
            let core = match kind {
                BlockKind::Transformer => {
                    HiddenBlock::Transformer(TransformerBlock::new(&mut g, &cfg.block, causal, &mut rng)?)
                }
                BlockKind::FeedForward => {
                    HiddenBlock::FeedForward(FeedForwardBlock::new(&mut g, &cfg.block, &mut rng)?)
                }
                _ => unreachable!("validated above"),
            };
            let route = RoutingHead::new(&mut g, cfg.block.d, slots)?;
            hidden.push(HiddenLayer { core, route });
        }
        // Zero-initialized so the iteration count leaves a fresh model's
        // output unchanged; training differentiates the rows.
        let iter_emb = if cfg.iterations > 0 {
            Some(g.param(
                vec![R::zero(); cfg.iterations * cfg.block.d],
                vec![cfg.iterations, cfg.block.d],
            )?)
        } else {
            None
        };
        let mut outputs = Vec::with_capacity(cfg.outputs);
        for _ in 0..cfg.outputs {
            outputs.push(OutputHead::new(&mut g, cfg.block.d, out_dim, head, &mut rng)?);
        }
        g.seal();
        Ok(Self { graph: g, cfg, inputs, hidden, outputs, iter_emb })
    }

    pub fn config(&self) -> &HModelConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &Graph<R> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<R> {
        &mut self.graph
    }

    pub fn set_alpha0(&mut self, alpha0: f64) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.alpha0 = alpha0;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn set_alpha_rate(&mut self, rate: f64) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.alpha_rate = rate;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn set_topk(&mut self, topk: Option<usize>) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.topk = topk;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Trainable parameters in a fixed canonical order.
    pub fn named_params(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::new();
        for (i, layer) in self.inputs.iter().enumerate() {
            layer.embed.params(&format!("in{i}"), &mut out);
            layer.route.params(&format!("in{i}.route"), &mut out);
        }
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.core.params(&format!("h{i}"), &mut out);
            layer.route.params(&format!("h{i}.route"), &mut out);
        }
        if let Some(emb) = self.iter_emb {
            out.push(("iter_emb".into(), emb));
        }
        for (k, head) in self.outputs.iter().enumerate() {
            head.params(&format!("out{k}"), &mut out);
        }
        out
    }

    /// Run the routed forward pass and return one logits tensor per output
    /// layer. `batches` supplies one token batch per input layer, all of
    /// one shape. A plan replaces the learned routing weights; a recorder
    /// captures the effective weights of every stage.
    pub fn forward(
        &mut self,
        batches: &[TokenBatch],
        mode: Mode,
        plan: Option<&RoutingPlan>,
        mut trace: Option<&mut TraceHook<'_>>,
    ) -> Result<Vec<TensorId>> {
        let cfg = self.cfg.clone();
        if batches.len() != cfg.inputs {
            return Err(Error::Contract {
                op: "forward",
                detail: format!("{} batches for {} input layers", batches.len(), cfg.inputs),
            });
        }
        let (batch, seq) = (batches[0].batch, batches[0].seq);
        if batches.iter().any(|b| b.batch != batch || b.seq != seq) {
            return Err(Error::Contract {
                op: "forward",
                detail: "input batches must share one batch and sequence size".into(),
            });
        }
        if let Some(p) = plan {
            p.validate(&cfg)?;
        }
        let topk = match mode {
            Mode::Infer => cfg.topk,
            Mode::Train => None,
        };
        let dims = StateDims { batch, seq, d: cfg.block.d, slots: cfg.slots() };

        self.graph.reset();
        let g = &mut self.graph;

        // Input stage: embed every input batch, route it, fold into slots.
        let mut contribs = Vec::with_capacity(cfg.inputs);
        for (i, tb) in batches.iter().enumerate() {
            let stage = move |e: Error| e.with_context(format!("input stage, layer {i}"));
            let sub = self.inputs[i]
                .embed
                .forward(g, &tb.ids, batch, seq)
                .map_err(stage)?;
            let con = routed_weights(
                g,
                sub,
                &self.inputs[i].route,
                cfg.alpha0,
                plan.map(|p| p.stages[0][i].as_slice()),
                batch,
                topk,
            )
            .map_err(stage)?;
            if let Some(hook) = trace.as_deref_mut() {
                hook.record(0, i, g.data(con)?, dims.slots)?;
            }
            contribs.push((sub, con));
        }
        let bundle = aggregate(g, &contribs, dims)?;
        let bundle = norm_by_contributors(g, bundle)?;
        let mut outs: Vec<TensorId> = bundle.slots[cfg.hidden..].to_vec();
        let mut state = bundle;

        for j in 0..cfg.iterations {
            let alpha = cfg.alpha_at(j)?;
            let emb_row = match self.iter_emb {
                Some(emb) => Some(g.slice_row(emb, j)?),
                None => None,
            };
            let mut contribs = Vec::with_capacity(cfg.hidden);
            for i in 0..cfg.hidden {
                let stage = move |e: Error| e.with_context(format!("iteration {j}, layer {i}"));
                let x = state.slots[i];
                let sub = self.hidden[i].core.forward(g, x).map_err(stage)?;
                // The routing weights read the layer output as produced;
                // the iteration embedding is added afterwards.
                let con = routed_weights(
                    g,
                    sub,
                    &self.hidden[i].route,
                    alpha,
                    plan.map(|p| p.stages[1 + j][i].as_slice()),
                    batch,
                    topk,
                )
                .map_err(stage)?;
                let sub = match emb_row {
                    Some(row) => g.add(sub, row).map_err(stage)?,
                    None => sub,
                };
                if let Some(hook) = trace.as_deref_mut() {
                    hook.record(1 + j, i, g.data(con)?, dims.slots)?;
                }
                contribs.push((sub, con));
            }
            let bundle = aggregate(g, &contribs, dims)?;
            state = norm_by_contributors(g, bundle)?;
            for (k, out) in outs.iter_mut().enumerate() {
                *out = g.add(*out, state.slots[cfg.hidden + k])?;
            }
        }

        // Average the accumulated output slots over the iteration count.
        let iters = cfg.iterations.max(1);
        let scale = R::one() / R::from_usize(iters);
        let mut logits = Vec::with_capacity(cfg.outputs);
        for (k, head) in self.outputs.iter().enumerate() {
            let avg = g.scale(outs[k], scale)?;
            let l = head
                .forward(g, avg)
                .map_err(|e| e.with_context(format!("output layer {k}")))?;
            logits.push(l);
        }
        Ok(logits)
    }
}

/// Compute the effective connection weights for one layer: either the
/// learned head at temperature `alpha` or a fixed plan row, then optional
/// top-k sparsification.
fn routed_weights<R: Real>(
    g: &mut Graph<R>,
    layer_out: TensorId,
    head: &RoutingHead,
    alpha: f64,
    plan_row: Option<&[f64]>,
    batch: usize,
    topk: Option<usize>,
) -> Result<TensorId> {
    let con = match plan_row {
        Some(row) => {
            let mut data = Vec::with_capacity(batch * row.len());
            for _ in 0..batch {
                data.extend(row.iter().map(|&w| R::from_f64(w)));
            }
            g.constant(data, vec![batch, row.len()])?
        }
        None => {
            let signal = routing_signal(g, layer_out)?;
            head.connections(g, signal, alpha)?
        }
    };
    match topk {
        Some(k) => g.sparsify_topk(con, k),
        None => Ok(con),
    }
}

/// Destination for per-stage routing weights during a forward pass.
/// Decouples the model from the trace module's record bookkeeping.
pub struct TraceHook<'a> {
    recorder: &'a mut crate::trace::TraceRecorder,
}

impl<'a> TraceHook<'a> {
    pub fn new(recorder: &'a mut crate::trace::TraceRecorder) -> Self {
        Self { recorder }
    }

    fn record<R: Real>(&mut self, stage: usize, source: usize, con: &[R], slots: usize) -> Result<()> {
        self.recorder.record_stage(stage, source, con, slots)
    }
}

/// A plain pre-norm stack of the same layer blocks: embed, run the blocks
/// in order, apply one head. Serves as the unrouted baseline.
pub struct StackedModel<R: Real> {
    graph: Graph<R>,
    embed: InputEmbedding,
    blocks: Vec<TransformerBlock>,
    head: OutputHead,
}

impl<R: Real> StackedModel<R> {
    pub fn new(
        layers: usize,
        block: BlockConfig,
        head: HeadMode,
        out_dim: usize,
        causal: bool,
        seed: u64,
    ) -> Result<Self> {
        block.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let embed = InputEmbedding::new(&mut g, &block, &mut rng)?;
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            blocks.push(TransformerBlock::new(&mut g, &block, causal, &mut rng)?);
        }
        let head = OutputHead::new(&mut g, block.d, out_dim, head, &mut rng)?;
        g.seal();
        Ok(Self { graph: g, embed, blocks, head })
    }

    pub fn graph(&self) -> &Graph<R> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<R> {
        &mut self.graph
    }

    pub fn named_params(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::new();
        self.embed.params("embed", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("b{i}"), &mut out);
        }
        self.head.params("head", &mut out);
        out
    }

    pub fn forward(&mut self, batch: &TokenBatch) -> Result<TensorId> {
        self.graph.reset();
        let g = &mut self.graph;
        let mut h = self.embed.forward(g, &batch.ids, batch.batch, batch.seq)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b
                .forward(g, h)
                .map_err(|e| e.with_context(format!("stacked layer {i}")))?;
        }
        self.head.forward(g, h)
    }
}

/// Anything the training loop can drive: a graph of parameters plus a
/// single-input, single-output forward pass.
pub trait Network {
    fn graph(&self) -> &Graph<f32>;
    fn graph_mut(&mut self) -> &mut Graph<f32>;
    fn named_params(&self) -> Vec<(String, TensorId)>;
    fn forward_logits(
        &mut self,
        batch: &TokenBatch,
        mode: Mode,
        trace: Option<&mut TraceHook<'_>>,
    ) -> Result<TensorId>;
    /// Starting routing temperature, if the network routes at all.
    fn routing_alpha(&self) -> Option<f64>;
}

impl Network for HModel<f32> {
    fn graph(&self) -> &Graph<f32> {
        &self.graph
    }

    fn graph_mut(&mut self) -> &mut Graph<f32> {
        &mut self.graph
    }

    fn named_params(&self) -> Vec<(String, TensorId)> {
        HModel::named_params(self)
    }

    fn forward_logits(
        &mut self,
        batch: &TokenBatch,
        mode: Mode,
        trace: Option<&mut TraceHook<'_>>,
    ) -> Result<TensorId> {
        if self.cfg.inputs != 1 || self.cfg.outputs != 1 {
            return Err(Error::Contract {
                op: "forward_logits",
                detail: format!(
                    "single-stream forward needs 1 input and 1 output layer, got {}/{}",
                    self.cfg.inputs, self.cfg.outputs
                ),
            });
        }
        let mut logits = self.forward(std::slice::from_ref(batch), mode, None, trace)?;
        Ok(logits.pop().expect("one output layer"))
    }

    fn routing_alpha(&self) -> Option<f64> {
        Some(self.cfg.alpha0)
    }
}

impl Network for StackedModel<f32> {
    fn graph(&self) -> &Graph<f32> {
        &self.graph
    }

    fn graph_mut(&mut self) -> &mut Graph<f32> {
        &mut self.graph
    }

    fn named_params(&self) -> Vec<(String, TensorId)> {
        StackedModel::named_params(self)
    }

    fn forward_logits(
        &mut self,
        batch: &TokenBatch,
        _mode: Mode,
        _trace: Option<&mut TraceHook<'_>>,
    ) -> Result<TensorId> {
        self.forward(batch)
    }

    fn routing_alpha(&self) -> Option<f64> {
        None
    }
}
