//! Training and evaluation driver: Adam with gradient clipping, a
//! deterministic train/eval batch split, JSONL metrics, and divergence
//! handling with a rollback checkpoint.
//!
//! Batches come from the task's pure `(size, index)` generator. Training
//! step `s` draws index `s + s / 9`, which never lands on a residue of 9
//! modulo 10; evaluation batch `e` draws `10 * e + 9`. The two streams
//! are disjoint, so evaluation is held out by construction.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Mode, Network, TraceHook};
use crate::tasks::{Batch, Targets, Task};
use crate::tensor::{Graph, TensorId};
use crate::trace::TraceRecorder;

/// Optimization hyperparameters and loop lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub steps: usize,
    /// Maximum global gradient norm; larger gradients are rescaled.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate every this many steps (and always after the last step).
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Stop as soon as an evaluation reaches this accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 32,
            steps: 1000,
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 100,
            eval_batches: 8,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::Contract { op: "train_config", detail });
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch == 0 || self.eval_batches == 0 || self.eval_every == 0 {
            return fail("batch, eval_batches and eval_every must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 || c.is_nan() {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return fail(format!("target_accuracy must lie in [0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

/// Task batch index for training step `s`. Skips every index that is
/// 9 modulo 10; those belong to evaluation.
pub fn train_index(step: usize) -> u64 {
    (step + step / 9) as u64
}

/// Task batch index for evaluation batch `e`.
pub fn eval_index(e: usize) -> u64 {
    10 * e as u64 + 9
}

/// Adam with bias correction. Moment buffers live outside the graph; the
/// update math runs in f64 and lands back in f32 parameters.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, graph: &Graph<f32>, params: &[(String, TensorId)]) -> Result<Self> {
        cfg.validate()?;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (_, id) in params {
            let n = graph.data(*id)?.len();
            m.push(vec![0.0; n]);
            v.push(vec![0.0; n]);
        }
        Ok(Self { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, t: 0, m, v })
    }

    /// Apply one update from the gradients currently on the graph.
    /// Returns the pre-clip global gradient norm. Parameters without a
    /// gradient count as zero.
    pub fn step(
        &mut self,
        graph: &mut Graph<f32>,
        params: &[(String, TensorId)],
        grad_clip: Option<f64>,
    ) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(Error::Contract {
                op: "adam",
                detail: format!("{} parameters, optimizer built for {}", params.len(), self.m.len()),
            });
        }
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
        let mut sq_sum = 0.0f64;
        for ((name, id), m) in params.iter().zip(&self.m) {
            let g: Vec<f64> = match graph.grad(*id)? {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; m.len()],
            };
            if g.len() != m.len() {
                return Err(Error::Contract {
                    op: "adam",
                    detail: format!("parameter `{name}` changed size under the optimizer"),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad { name: name.clone() });
            }
            sq_sum += g.iter().map(|v| v * v).sum::<f64>();
            grads.push(g);
        }
        let norm = sq_sum.sqrt();
        let scale = match grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, id), g), (m, v)) in
            params.iter().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let w = graph.data_mut(*id)?;
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                w[i] = (w[i] as f64 - update) as f32;
            }
        }
        Ok(norm)
    }
}

/// Fraction of rows whose argmax logit hits the target. Ties resolve to
/// the lowest index.
pub fn accuracy(logits: &[f32], rows: usize, cols: usize, targets: &[u32]) -> f64 {
    assert_eq!(logits.len(), rows * cols);
    assert_eq!(targets.len(), rows);
    if rows == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        if best as u32 == targets[r] {
            hits += 1;
        }
    }
    hits as f64 / rows as f64
}

/// Run one batch through a network and attach the loss node. Returns the
/// loss tensor and the batch accuracy.
pub fn batch_loss(
    net: &mut dyn Network,
    batch: &Batch,
    mode: Mode,
    trace: Option<&mut TraceHook<'_>>,
) -> Result<(TensorId, f64)> {
    let logits = net.forward_logits(&batch.tokens, mode, trace)?;
    let g = net.graph_mut();
    match &batch.targets {
        Targets::NextTokens(targets) => {
            let shape = g.shape(logits)?.to_vec();
            if shape.len() != 3 {
                return Err(Error::BadShape {
                    op: "batch_loss",
                    shape,
                    detail: "per-position targets need (batch, seq, vocab) logits".into(),
                });
            }
            let (rows, cols) = (shape[0] * shape[1], shape[2]);
            let flat = g.reshape(logits, vec![rows, cols])?;
            let loss = g.cross_entropy(flat, targets)?;
            let acc = accuracy(g.data(flat)?, rows, cols, targets);
            Ok((loss, acc))
        }
        Targets::Labels(targets) => {
            let shape = g.shape(logits)?.to_vec();
            if shape.len() != 2 {
                return Err(Error::BadShape {
                    op: "batch_loss",
                    shape,
                    detail: "per-example labels need (batch, classes) logits".into(),
                });
            }
            let loss = g.cross_entropy(logits, targets)?;
            let acc = accuracy(g.data(logits)?, shape[0], shape[1], targets);
            Ok((loss, acc))
        }
    }
}

/// Loss and accuracy over a held-out sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Evaluate over the held-out batch stream at inference settings. A
/// recorder captures the routing of every evaluated example.
pub fn evaluate(
    net: &mut dyn Network,
    task: &Task,
    batch_size: usize,
    batches: usize,
    mut recorder: Option<&mut TraceRecorder>,
) -> Result<EvalStats> {
    if batches == 0 {
        return Err(Error::Contract { op: "evaluate", detail: "need at least one batch".into() });
    }
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for e in 0..batches {
        let batch = task.batch(batch_size, eval_index(e))?;
        let (loss, acc) = match recorder.as_deref_mut() {
            Some(rec) => {
                rec.begin_batch(&batch.conditions);
                let mut hook = TraceHook::new(rec);
                batch_loss(net, &batch, Mode::Infer, Some(&mut hook))?
            }
            None => batch_loss(net, &batch, Mode::Infer, None)?,
        };
        loss_sum += net.graph().data(loss)?[0] as f64;
        acc_sum += acc;
    }
    Ok(EvalStats { loss: loss_sum / batches as f64, accuracy: acc_sum / batches as f64 })
}

/// One line of the JSONL metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Where the training loop writes its artifacts.
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// JSONL metrics, one record per line.
    pub metrics: Option<&'a mut dyn Write>,
    /// Directory for rollback checkpoints; `last_good.hmck` is refreshed
    /// at every successful evaluation.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Result of a completed (or early-stopped) training run.
pub struct TrainOutcome {
    /// Optimizer steps actually taken.
    pub steps_run: usize,
    pub final_eval: EvalStats,
    /// True when `target_accuracy` was reached before the step budget.
    pub stopped_early: bool,
    /// Final parameters with the run configuration embedded.
    pub checkpoint: Checkpoint,
}

/// The full training loop. On a non-finite loss or gradient the loop
/// stops and reports the step plus the path of the last known-good
/// checkpoint, if one was written.
pub fn train(
    net: &mut dyn Network,
    task: &Task,
    cfg: &TrainConfig,
    config_json: &str,
    sinks: &mut TrainSinks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = net.named_params();
    let mut adam = Adam::new(cfg, net.graph(), &params)?;

    let mut last_good: Option<PathBuf> = None;
    if let Some(dir) = sinks.checkpoint_dir {
        let path = dir.join("last_good.hmck");
        Checkpoint::capture(config_json, net.graph(), &params)?.save(&path)?;
        last_good = Some(path);
    }
    let diverged = |e: Error, step: usize, last_good: &Option<PathBuf>| match e {
        Error::NonFinite { .. } | Error::NonFiniteGrad { .. } => Error::Diverged {
            step,
            last_good: last_good.as_ref().map(|p| p.display().to_string()),
        },
        other => other,
    };

    let mut steps_run = 0;
    let mut stopped_early = false;
    let mut final_eval = None;
    for step in 0..cfg.steps {
        let batch = task.batch(cfg.batch, train_index(step))?;
        let (loss, acc) =
            batch_loss(net, &batch, Mode::Train, None).map_err(|e| diverged(e, step, &last_good))?;
        let loss_value = net.graph().data(loss)?[0] as f64;
        net.graph_mut().zero_grads();
        net.graph_mut().backward(loss)?;
        adam
            .step(net.graph_mut(), &params, cfg.grad_clip)
            .map_err(|e| diverged(e, step, &last_good))?;
        steps_run = step + 1;

        if let Some(w) = sinks.metrics.as_deref_mut() {
            let rec = MetricsRecord {
                step,
                split: "train".into(),
                loss: loss_value,
                accuracy: acc,
                alpha: net.routing_alpha(),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }

        let due = steps_run % cfg.eval_every == 0 || steps_run == cfg.steps;
        if !due {
            continue;
        }
        let stats = evaluate(net, task, cfg.batch, cfg.eval_batches, None)
            .map_err(|e| diverged(e, step, &last_good))?;
        final_eval = Some(stats);
        if let Some(w) = sinks.metrics.as_deref_mut() {
            let rec = MetricsRecord {
                step,
                split: "eval".into(),
                loss: stats.loss,
                accuracy: stats.accuracy,
                alpha: net.routing_alpha(),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }
        if let Some(dir) = sinks.checkpoint_dir {
            let path = dir.join("last_good.hmck");
            Checkpoint::capture(config_json, net.graph(), &params)?.save(&path)?;
            last_good = Some(path);
        }
        if let Some(target) = cfg.target_accuracy {
            if stats.accuracy >= target {
                stopped_early = true;
                break;
            }
        }
    }

    let final_eval = match final_eval {
        Some(s) => s,
        None => evaluate(net, task, cfg.batch, cfg.eval_batches, None)?,
    };
    let checkpoint = Checkpoint::capture(config_json, net.graph(), &params)?;
    Ok(TrainOutcome { steps_run, final_eval, stopped_early, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockConfig, BlockKind, HeadMode};
    use crate::model::{HModel, HModelConfig};
    use crate::tasks::TaskSpec;

    fn chain_task() -> Task {
        TaskSpec::Chain { symbols: 8, depth: 1, seq: 12, seed: 11 }.build().unwrap()
    }

    fn tiny_net(task: &Task, seed: u64) -> HModel<f32> {
        let cfg = HModelConfig {
            inputs: 1,
            hidden: 2,
            outputs: 1,
            iterations: 2,
            block: BlockConfig { d: 16, ff: 32, heads: 2, seq: task.seq(), vocab: task.vocab() },
            alpha0: 1.0,
            alpha_rate: 0.7,
            topk: None,
        };
        HModel::new(
            cfg,
            &[BlockKind::Transformer, BlockKind::FeedForward],
            HeadMode::LastPositionClasses,
            task.out_dim(),
            true,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn train_and_eval_indices_never_collide() {
        let train: std::collections::HashSet<u64> = (0..10_000).map(train_index).collect();
        let eval: std::collections::HashSet<u64> = (0..1_000).map(eval_index).collect();
        assert_eq!(train.len(), 10_000, "training indices must not repeat");
        assert!(train.is_disjoint(&eval));
    }

    #[test]
    fn adam_matches_a_hand_computed_first_step() {
        let mut g: Graph<f32> = Graph::new();
        let w = g.param(vec![1.0, 2.0], vec![2]).unwrap();
        g.seal();
        let x = g.constant(vec![3.0, 4.0], vec![2]).unwrap();
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod, None).unwrap();
        g.backward(loss).unwrap();

        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let params = vec![("w".to_string(), w)];
        let mut adam = Adam::new(&cfg, &g, &params).unwrap();
        let norm = adam.step(&mut g, &params, None).unwrap();
        assert!((norm - 5.0).abs() < 1e-6);
        // First Adam step moves every coordinate by lr / (1 + eps)
        // against the gradient sign, regardless of magnitude.
        let w_now = g.data(w).unwrap();
        assert!((w_now[0] - (1.0 - 0.1)).abs() < 1e-5, "{w_now:?}");
        assert!((w_now[1] - (2.0 - 0.1)).abs() < 1e-5, "{w_now:?}");
    }

    #[test]
    fn clipping_rescales_to_exactly_the_limit() {
        let mut g: Graph<f32> = Graph::new();
        let w = g.param(vec![0.0, 0.0], vec![2]).unwrap();
        g.seal();
        let x = g.constant(vec![30.0, 40.0], vec![2]).unwrap();
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod, None).unwrap();
        g.backward(loss).unwrap();

        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let params = vec![("w".to_string(), w)];
        let mut adam = Adam::new(&cfg, &g, &params).unwrap();
        // Pre-clip norm is reported even though the applied gradient is
        // scaled down to norm 1.
        let norm = adam.step(&mut g, &params, Some(1.0)).unwrap();
        assert!((norm - 50.0).abs() < 1e-4);
    }

    #[test]
    fn accuracy_counts_first_argmax_hits() {
        let logits = [0.1, 0.9, 0.5, 0.5, 2.0, -1.0];
        assert_eq!(accuracy(&logits, 3, 2, &[1, 0, 0]), 1.0);
        assert_eq!(accuracy(&logits, 3, 2, &[1, 1, 0]), 2.0 / 3.0);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let cfg = TrainConfig { lr: -1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { beta2: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let task = chain_task();
        let mut net = tiny_net(&task, 3);
        let cfg = TrainConfig {
            lr: 3e-3,
            batch: 16,
            steps: 30,
            eval_every: 30,
            eval_batches: 2,
            ..TrainConfig::default()
        };
        let mut lines = Vec::new();
        let mut sinks = TrainSinks { metrics: Some(&mut lines), checkpoint_dir: None };
        let out = train(&mut net, &task, &cfg, "{}", &mut sinks).unwrap();
        assert_eq!(out.steps_run, 30);
        assert!(!out.stopped_early);

        let text = String::from_utf8(lines).unwrap();
        let records: Vec<MetricsRecord> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let train_losses: Vec<f64> =
            records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
        assert_eq!(train_losses.len(), 30);
        let head: f64 = train_losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = train_losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss went from {head} to {tail}");
        // Exactly one eval record, at the final step.
        let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.split == "eval").collect();
        assert_eq!(evals.len(), 1);
        assert_eq!(evals[0].step, 29);
        assert_eq!(evals[0].alpha, Some(1.0));
    }

    #[test]
    fn identical_runs_produce_identical_metrics_and_weights() {
        let task = chain_task();
        let cfg = TrainConfig {
            batch: 8,
            steps: 6,
            eval_every: 3,
            eval_batches: 1,
            ..TrainConfig::default()
        };
        let run = |seed| {
            let mut net = tiny_net(&task, seed);
            let mut lines = Vec::new();
            let mut sinks = TrainSinks { metrics: Some(&mut lines), checkpoint_dir: None };
            let out = train(&mut net, &task, &cfg, "{}", &mut sinks).unwrap();
            (lines, out.checkpoint.to_bytes())
        };
        let (m1, c1) = run(5);
        let (m2, c2) = run(5);
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
        let (m3, _) = run(6);
        assert_ne!(m1, m3);
    }

    #[test]
    fn early_stop_fires_once_the_target_is_reached() {
        let task = chain_task();
        let mut net = tiny_net(&task, 3);
        let cfg = TrainConfig {
            batch: 8,
            steps: 50,
            eval_every: 2,
            eval_batches: 1,
            // Any accuracy satisfies a target of zero, so the loop must
            // stop at the very first evaluation.
            target_accuracy: Some(0.0),
            ..TrainConfig::default()
        };
        let mut sinks = TrainSinks::default();
        let out = train(&mut net, &task, &cfg, "{}", &mut sinks).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.steps_run, 2);
    }

    #[test]
    fn divergence_reports_step_and_rollback_path() {
        let task = chain_task();
        let mut net = tiny_net(&task, 3);
        // An absurd learning rate blows the parameters up within a few
        // steps; the loop must fail with a divergence error that names
        // the rollback file.
        let cfg = TrainConfig {
            lr: 1e18,
            grad_clip: None,
            batch: 8,
            steps: 50,
            eval_every: 100,
            eval_batches: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut sinks = TrainSinks { metrics: None, checkpoint_dir: Some(dir.path()) };
        match train(&mut net, &task, &cfg, "{}", &mut sinks) {
            Err(Error::Diverged { step, last_good }) => {
                assert!(step < 50);
                let path = last_good.expect("rollback checkpoint path");
                let ck = Checkpoint::load(path).unwrap();
                // The rollback state predates the explosion: finite.
                assert!(ck.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite())));
            }
            Err(other) => panic!("expected divergence, got {other:?}"),
            Ok(_) => panic!("expected divergence, run finished"),
        }
    }

    #[test]
    fn evaluate_can_record_routing_for_every_example() {
        let task = chain_task();
        let mut net = tiny_net(&task, 3);
        let mut rec = TraceRecorder::new();
        let stats = evaluate(&mut net, &task, 8, 2, Some(&mut rec)).unwrap();
        assert!(stats.loss.is_finite());
        assert_eq!(rec.records().len(), 16);
        // 1 input stage entry + 2 hidden layers over 2 iterations.
        assert!(rec.records().iter().all(|r| r.stages.len() == 5));
        assert!(rec.records().iter().all(|r| r.condition == "pos" || r.condition == "neg"));
    }
}
