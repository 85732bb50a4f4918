//! Independent verification of the model's numerics.
//!
//! Everything here checks the forward/backward implementation against a
//! second opinion that shares none of its code paths:
//!
//! * [`gradient_check`] compares every analytic gradient against central
//!   finite differences of the loss, evaluated on the 64-bit instantiation
//!   of the model.
//! * [`chain_equivalence_max_diff`] pins the routed model to the
//!   sequential wiring with a [`RoutingPlan`](crate::model::RoutingPlan)
//!   and compares it against [`RefStack`], a plain-loop f64 transformer
//!   stack fed the same parameter values.
//! * [`norm_bound_check`] verifies on random data that a normalized slot
//!   never exceeds its largest contributor in L2 norm.
//! * [`topk_identity_check`] verifies that keeping all `slots` weights
//!   leaves inference bitwise unchanged.
//!
//! [`verify_suite`] packages these as named pass/fail lines for the CLI.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockConfig, BlockKind, HeadMode};
use crate::error::{Error, Result};
use crate::model::{
    aggregate, norm_by_contributors, HModel, HModelConfig, Mode, RoutingPlan, StateDims,
    TokenBatch,
};
use crate::tensor::{Graph, Real, TensorId};

// ── finite-difference gradient check ────────────────────────────────────

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub tensors: usize,
    pub coords_checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
}

/// Compare analytic gradients of a next-token loss against central finite
/// differences on an f64 model. Every parameter tensor contributes up to
/// `samples_per_tensor` coordinates. Parameters are jittered first so no
/// routing weight or clamp sits exactly on a kink of the loss surface.
pub fn gradient_check(
    cfg: &HModelConfig,
    kinds: &[BlockKind],
    causal: bool,
    batch: usize,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckOutcome> {
    let mut model: HModel<f64> =
        HModel::new(cfg.clone(), kinds, HeadMode::TokenLogits, cfg.block.vocab, causal, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = model.named_params();
    for (_, id) in &params {
        for v in model.graph_mut().data_mut(*id)? {
            *v += rng.random_range(-0.05..0.05);
        }
    }

    let seq = cfg.block.seq;
    let ids: Vec<u32> = (0..batch * seq).map(|_| rng.random_range(0..cfg.block.vocab as u32)).collect();
    let tokens = TokenBatch::new(ids, batch, seq)?;
    let targets: Vec<u32> =
        (0..batch * seq).map(|_| rng.random_range(0..cfg.block.vocab as u32)).collect();

    let loss_of = |model: &mut HModel<f64>| -> Result<(TensorId, f64)> {
        let logits = model.forward(std::slice::from_ref(&tokens), Mode::Train, None, None)?;
        let g = model.graph_mut();
        let shape = g.shape(logits[0])?.to_vec();
        let flat = g.reshape(logits[0], vec![shape[0] * shape[1], shape[2]])?;
        let loss = g.cross_entropy(flat, &targets)?;
        let value = g.data(loss)?[0];
        Ok((loss, value))
    };

    let (loss, _) = loss_of(&mut model)?;
    model.graph_mut().zero_grads();
    model.graph_mut().backward(loss)?;
    let mut analytic = Vec::with_capacity(params.len());
    for (name, id) in &params {
        let grad = model
            .graph()
            .grad(*id)?
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; model.graph().data(*id).map(|d| d.len()).unwrap_or(0)]);
        analytic.push((name.clone(), *id, grad));
    }

    let mut worst_rel = 0.0f64;
    let mut worst_param = String::new();
    let mut coords_checked = 0usize;
    for (name, id, grad) in &analytic {
        let n = grad.len();
        let picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            // Distinct coordinates, deterministic under the seed.
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < samples_per_tensor {
                seen.insert(rng.random_range(0..n));
            }
            seen.into_iter().collect()
        };
        for i in picks {
            let orig = model.graph().data(*id)?[i];
            let eps = 1e-6 * (1.0 + orig.abs());
            model.graph_mut().data_mut(*id)?[i] = orig + eps;
            let (_, up) = loss_of(&mut model)?;
            model.graph_mut().data_mut(*id)?[i] = orig - eps;
            let (_, down) = loss_of(&mut model)?;
            model.graph_mut().data_mut(*id)?[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            coords_checked += 1;
            if rel > worst_rel {
                worst_rel = rel;
                worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(GradCheckOutcome { tensors: params.len(), coords_checked, worst_rel, worst_param })
}

// ── independent sequential reference ────────────────────────────────────

struct RefLinear {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

impl RefLinear {
    /// `x` is `[rows, fan_in]` row-major.
    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.fan_out];
        for r in 0..rows {
            for c in 0..self.fan_out {
                let mut acc = self.b[c];
                for k in 0..self.fan_in {
                    acc += x[r * self.fan_in + k] * self.w[k * self.fan_out + c];
                }
                y[r * self.fan_out + c] = acc;
            }
        }
        y
    }
}

struct RefBlock {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    q: RefLinear,
    k: RefLinear,
    v: RefLinear,
    o: RefLinear,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    up: RefLinear,
    down: RefLinear,
}

/// A from-scratch f64 transformer stack used as the reference for the
/// sequential-equivalence check: token and position embedding, `layers`
/// pre-norm blocks in order, the accumulated output divided by the
/// iteration count, then the logits head. Implemented with plain loops so
/// it shares nothing with the graph code.
pub struct RefStack {
    d: usize,
    heads: usize,
    causal: bool,
    /// Division applied to the block-stack output before the head; the
    /// routed model averages its output slots over this many iterations.
    iterations: usize,
    tok: Vec<f64>,
    pos: Vec<f64>,
    blocks: Vec<RefBlock>,
    head: RefLinear,
}

impl RefStack {
    /// Pull the parameter values of a routed model whose hidden layers
    /// are all transformer blocks.
    pub fn from_model(model: &HModel<f32>, causal: bool) -> Result<Self> {
        let cfg = model.config().clone();
        if cfg.inputs != 1 || cfg.outputs != 1 {
            return Err(Error::Contract {
                op: "ref_stack",
                detail: "the reference mirrors single-input, single-output models".into(),
            });
        }
        let named: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = model
            .named_params()
            .into_iter()
            .map(|(name, id)| {
                let shape = model.graph().shape(id).unwrap().to_vec();
                let data = model.graph().data(id).unwrap().iter().map(|&v| v as f64).collect();
                (name, (shape, data))
            })
            .collect();
        let get = |name: &str| -> Result<Vec<f64>> {
            named
                .get(name)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::Contract {
                    op: "ref_stack",
                    detail: format!("parameter `{name}` not found"),
                })
        };
        let linear = |prefix: &str, fan_in: usize, fan_out: usize| -> Result<RefLinear> {
            Ok(RefLinear { w: get(&format!("{prefix}.w"))?, b: get(&format!("{prefix}.b"))?, fan_in, fan_out })
        };
        let d = cfg.block.d;
        let mut blocks = Vec::with_capacity(cfg.hidden);
        for i in 0..cfg.hidden {
            blocks.push(RefBlock {
                ln1_g: get(&format!("h{i}.ln1.g"))?,
                ln1_b: get(&format!("h{i}.ln1.b"))?,
                q: linear(&format!("h{i}.attn.q"), d, d)?,
                k: linear(&format!("h{i}.attn.k"), d, d)?,
                v: linear(&format!("h{i}.attn.v"), d, d)?,
                o: linear(&format!("h{i}.attn.o"), d, d)?,
                ln2_g: get(&format!("h{i}.ln2.g"))?,
                ln2_b: get(&format!("h{i}.ln2.b"))?,
                up: linear(&format!("h{i}.ff.up"), d, cfg.block.ff)?,
                down: linear(&format!("h{i}.ff.down"), cfg.block.ff, d)?,
            });
        }
        let out_dim = named
            .get("out0.w")
            .map(|(shape, _)| shape[1])
            .ok_or_else(|| Error::Contract { op: "ref_stack", detail: "head weights not found".into() })?;
        Ok(RefStack {
            d,
            heads: cfg.block.heads,
            causal,
            iterations: cfg.iterations.max(1),
            tok: get("in0.tok")?,
            pos: get("in0.pos")?,
            blocks,
            head: linear("out0", d, out_dim)?,
        })
    }

    fn layer_norm(x: &mut [f64], g: &[f64], b: &[f64], d: usize) {
        for row in x.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for j in 0..d {
                row[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
    }

    fn block_forward(&self, block: &RefBlock, x: &mut [f64], s: usize) {
        let d = self.d;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut h = x.to_vec();
        Self::layer_norm(&mut h, &block.ln1_g, &block.ln1_b, d);
        let q = block.q.apply(&h, s);
        let k = block.k.apply(&h, s);
        let v = block.v.apply(&h, s);

        let mut merged = vec![0.0; s * d];
        for head in 0..self.heads {
            let off = head * hd;
            for i in 0..s {
                let mut scores = vec![0.0; s];
                for j in 0..s {
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += q[i * d + off + c] * k[j * d + off + c];
                    }
                    scores[j] = acc * scale;
                    if self.causal && j > i {
                        scores[j] += -1e9;
                    }
                }
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                for sc in scores.iter_mut() {
                    *sc /= sum;
                }
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..s {
                        acc += scores[j] * v[j * d + off + c];
                    }
                    merged[i * d + off + c] = acc;
                }
            }
        }
        let proj = block.o.apply(&merged, s);
        for i in 0..x.len() {
            x[i] += proj[i];
        }

        let mut h2 = x.to_vec();
        Self::layer_norm(&mut h2, &block.ln2_g, &block.ln2_b, d);
        let mid = block.up.apply(&h2, s);
        let mid: Vec<f64> = mid.into_iter().map(|v| v.max(0.0)).collect();
        let out = block.down.apply(&mid, s);
        for i in 0..x.len() {
            x[i] += out[i];
        }
    }

    /// Forward one batch: `[batch * seq * out_dim]` logits, row-major.
    pub fn forward(&self, ids: &[u32], batch: usize, seq: usize) -> Vec<f64> {
        let d = self.d;
        let mut logits = Vec::with_capacity(batch * seq * self.head.fan_out);
        for e in 0..batch {
            let mut x = vec![0.0; seq * d];
            for p in 0..seq {
                let t = ids[e * seq + p] as usize;
                for c in 0..d {
                    x[p * d + c] = self.tok[t * d + c] + self.pos[p * d + c];
                }
            }
            for block in &self.blocks {
                self.block_forward(block, &mut x, seq);
            }
            for v in x.iter_mut() {
                *v /= self.iterations as f64;
            }
            logits.extend(self.head.apply(&x, seq));
        }
        logits
    }
}

/// Build a fresh routed model, force it onto the sequential wiring, and
/// return the largest absolute logit difference against [`RefStack`] on a
/// random batch. The config must satisfy the chain-plan preconditions.
pub fn chain_equivalence_max_diff(
    cfg: &HModelConfig,
    causal: bool,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let kinds = vec![BlockKind::Transformer; cfg.hidden];
    let mut model: HModel<f32> =
        HModel::new(cfg.clone(), &kinds, HeadMode::TokenLogits, cfg.block.vocab, causal, seed)?;
    let plan = RoutingPlan::chain(cfg)?;
    let reference = RefStack::from_model(&model, causal)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbadc);
    let ids: Vec<u32> =
        (0..batch * cfg.block.seq).map(|_| rng.random_range(0..cfg.block.vocab as u32)).collect();
    let tokens = TokenBatch::new(ids.clone(), batch, cfg.block.seq)?;

    let routed = model.forward(&[tokens], Mode::Train, Some(&plan), None)?;
    let routed = model.graph().data(routed[0])?;
    let expected = reference.forward(&ids, batch, cfg.block.seq);
    if routed.len() != expected.len() {
        return Err(Error::Contract {
            op: "chain_equivalence",
            detail: format!("logit counts differ: {} vs {}", routed.len(), expected.len()),
        });
    }
    let mut worst = 0.0f64;
    for (&a, &b) in routed.iter().zip(&expected) {
        worst = worst.max((a as f64 - b).abs());
    }
    Ok(worst)
}

// ── aggregation norm bound ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct NormCheckOutcome {
    pub trials: usize,
    pub slots_checked: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

/// Property check on random data: after weighted aggregation and
/// normalization, each example's slot state stays within `1 + allowance`
/// times the L2 norm of its largest contributor.
pub fn norm_bound_check<R: Real>(
    trials: usize,
    seed: u64,
    allowance: f64,
) -> Result<NormCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots_checked = 0usize;
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    for _ in 0..trials {
        let dims = StateDims {
            batch: rng.random_range(1..4),
            seq: rng.random_range(1..4),
            d: rng.random_range(1..6),
            slots: rng.random_range(1..4),
        };
        let contributors = rng.random_range(1..4);
        let mut g: Graph<R> = Graph::new();
        let mut contribs = Vec::with_capacity(contributors);
        let per = dims.seq * dims.d;
        for _ in 0..contributors {
            let sub: Vec<R> = (0..dims.batch * per)
                .map(|_| R::from_f64(rng.random_range(-3.0..3.0)))
                .collect();
            let con: Vec<R> = (0..dims.batch * dims.slots)
                .map(|_| R::from_f64(rng.random_range(0.0..1.0)))
                .collect();
            let sub = g.constant(sub, vec![dims.batch, dims.seq, dims.d])?;
            let con = g.constant(con, vec![dims.batch, dims.slots])?;
            contribs.push((sub, con));
        }
        let bundle = aggregate(&mut g, &contribs, dims)?;
        let bundle = norm_by_contributors(&mut g, bundle)?;

        for e in 0..dims.batch {
            let mut max_contrib = 0.0f64;
            for &(sub, _) in &contribs {
                let data = g.data(sub)?;
                let norm: f64 = data[e * per..(e + 1) * per]
                    .iter()
                    .map(|&v| Real::to_f64(v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                max_contrib = max_contrib.max(norm);
            }
            for &slot in &bundle.slots {
                let data = g.data(slot)?;
                let norm: f64 = data[e * per..(e + 1) * per]
                    .iter()
                    .map(|&v| Real::to_f64(v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                slots_checked += 1;
                if max_contrib == 0.0 {
                    continue;
                }
                let ratio = norm / max_contrib;
                worst_ratio = worst_ratio.max(ratio);
                if ratio > 1.0 + allowance {
                    violations += 1;
                }
            }
        }
    }
    Ok(NormCheckOutcome { trials, slots_checked, violations, worst_ratio })
}

// ── top-k identity ──────────────────────────────────────────────────────

/// Run random small models at inference with and without a keep-all
/// top-k and count the ones whose logits are not bitwise identical.
pub fn topk_identity_check(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for t in 0..trials {
        let hidden = rng.random_range(1..4);
        let cfg = HModelConfig {
            inputs: 1,
            hidden,
            outputs: rng.random_range(1..3),
            iterations: rng.random_range(0..4),
            block: BlockConfig {
                d: 8,
                ff: 16,
                heads: 2,
                seq: rng.random_range(2..6),
                vocab: 13,
            },
            alpha0: rng.random_range(0.3..2.0),
            alpha_rate: rng.random_range(0.5..1.2),
            topk: None,
        };
        let kinds: Vec<BlockKind> = (0..hidden)
            .map(|_| if rng.random_bool(0.5) { BlockKind::Transformer } else { BlockKind::FeedForward })
            .collect();
        let model_seed = seed ^ (t as u64).wrapping_mul(0x9e37);
        let mut model: HModel<f32> =
            HModel::new(cfg.clone(), &kinds, HeadMode::TokenLogits, 13, false, model_seed)?;
        let batch = 2;
        let ids: Vec<u32> =
            (0..batch * cfg.block.seq).map(|_| rng.random_range(0..13)).collect();
        let tokens = TokenBatch::new(ids, batch, cfg.block.seq)?;

        let dense = model.forward(std::slice::from_ref(&tokens), Mode::Infer, None, None)?;
        let dense: Vec<Vec<u32>> = dense
            .iter()
            .map(|&id| model.graph().data(id).unwrap().iter().map(|v| v.to_bits()).collect())
            .collect();
        model.set_topk(Some(cfg.slots()))?;
        let kept = model.forward(std::slice::from_ref(&tokens), Mode::Infer, None, None)?;
        let kept: Vec<Vec<u32>> = kept
            .iter()
            .map(|&id| model.graph().data(id).unwrap().iter().map(|v| v.to_bits()).collect())
            .collect();
        if dense != kept {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

// ── CLI-facing suites ───────────────────────────────────────────────────

/// One named verification with its verdict.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn grad_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let cfg = HModelConfig {
        inputs: 1,
        hidden: 2,
        outputs: 1,
        iterations: 2,
        block: BlockConfig { d: 8, ff: 16, heads: 2, seq: 6, vocab: 11 },
        alpha0: 1.0,
        alpha_rate: 0.7,
        topk: None,
    };
    let out = gradient_check(
        &cfg,
        &[BlockKind::Transformer, BlockKind::FeedForward],
        true,
        2,
        3,
        seed,
    )?;
    Ok(vec![CheckLine {
        name: "grad.finite_difference".into(),
        pass: out.worst_rel <= 1e-3,
        detail: format!(
            "worst relative error {:.3e} at {} over {} coordinates",
            out.worst_rel, out.worst_param, out.coords_checked
        ),
    }])
}

fn equiv_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let cfg = HModelConfig {
        inputs: 1,
        hidden: 3,
        outputs: 1,
        iterations: 3,
        block: BlockConfig { d: 16, ff: 32, heads: 2, seq: 8, vocab: 17 },
        alpha0: 1.0,
        alpha_rate: 0.7,
        topk: None,
    };
    let worst = chain_equivalence_max_diff(&cfg, true, 2, seed)?;
    Ok(vec![CheckLine {
        name: "equiv.sequential_chain".into(),
        pass: worst <= 1e-5,
        detail: format!("largest logit difference {worst:.3e} against the plain-loop stack"),
    }])
}

fn norm_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let out = norm_bound_check::<f64>(200, seed, 1e-12)?;
    Ok(vec![CheckLine {
        name: "norm.contribution_bound".into(),
        pass: out.violations == 0,
        detail: format!(
            "{} violations over {} slots, worst ratio {:.12}",
            out.violations, out.slots_checked, out.worst_ratio
        ),
    }])
}

fn topk_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let trials = 20;
    let mismatches = topk_identity_check(trials, seed)?;
    Ok(vec![CheckLine {
        name: "topk.keep_all_identity".into(),
        pass: mismatches == 0,
        detail: format!("{mismatches} of {trials} random models changed under a keep-all top-k"),
    }])
}

/// Run one named verification suite (`grad`, `equiv`, `norm`, `topk`) or
/// `all`.
pub fn verify_suite(suite: &str, seed: u64) -> Result<Vec<CheckLine>> {
    match suite {
        "grad" => grad_suite(seed),
        "equiv" => equiv_suite(seed),
        "norm" => norm_suite(seed),
        "topk" => topk_suite(seed),
        "all" => {
            let mut lines = grad_suite(seed)?;
            lines.extend(equiv_suite(seed)?);
            lines.extend(norm_suite(seed)?);
            lines.extend(topk_suite(seed)?);
            Ok(lines)
        }
        other => Err(Error::Contract {
            op: "verify",
            detail: format!("unknown suite `{other}`; expected grad, equiv, norm, topk or all"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_stack_matches_forced_chain_routing() {
        let cfg = HModelConfig {
            inputs: 1,
            hidden: 2,
            outputs: 1,
            iterations: 2,
            block: BlockConfig { d: 8, ff: 16, heads: 2, seq: 5, vocab: 7 },
            alpha0: 1.0,
            alpha_rate: 0.5,
            topk: None,
        };
        let worst = chain_equivalence_max_diff(&cfg, true, 3, 17).unwrap();
        assert!(worst <= 1e-5, "divergence {worst}");
        let worst = chain_equivalence_max_diff(&cfg, false, 3, 18).unwrap();
        assert!(worst <= 1e-5, "divergence {worst} without causal mask");
    }

    #[test]
    fn norm_bound_holds_on_random_bundles() {
        let out = norm_bound_check::<f64>(50, 3, 1e-12).unwrap();
        assert_eq!(out.violations, 0, "worst ratio {}", out.worst_ratio);
        assert!(out.slots_checked > 50);
        assert!(out.worst_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn keep_all_topk_is_invisible() {
        assert_eq!(topk_identity_check(5, 9).unwrap(), 0);
    }

    #[test]
    fn small_gradient_check_passes() {
        let cfg = HModelConfig {
            inputs: 1,
            hidden: 1,
            outputs: 1,
            iterations: 1,
            block: BlockConfig { d: 6, ff: 12, heads: 2, seq: 4, vocab: 7 },
            alpha0: 1.0,
            alpha_rate: 0.7,
            topk: None,
        };
        let out = gradient_check(&cfg, &[BlockKind::FeedForward], false, 2, 2, 5).unwrap();
        assert!(out.worst_rel <= 1e-3, "worst {} at {}", out.worst_rel, out.worst_param);
        assert!(out.coords_checked > 10);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(verify_suite("bogus", 0).is_err());
        let lines = verify_suite("norm", 4).unwrap();
        assert!(lines.iter().all(|l| l.pass), "{lines:?}");
    }
}
