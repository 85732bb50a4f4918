//! Run configuration: one JSON document describing the model, the task,
//! the training loop and the trace rendering.
//!
//! Configurations are strict: unknown or misplaced fields are rejected
//! with the offending name so a typo cannot silently fall back to a
//! default. The token vocabulary and sequence length are never stated in
//! the model section; they derive from the task.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BlockKind, HeadMode};
use crate::error::{Error, Result};
use crate::model::{HModel, HModelConfig, Mode, Network, StackedModel, TokenBatch, TraceHook};
use crate::tasks::{Task, TaskSpec};
use crate::tensor::{Graph, TensorId};
use crate::train::TrainConfig;

fn default_alpha0() -> f64 {
    1.0
}

fn default_alpha_rate() -> f64 {
    0.7
}

fn default_causal() -> bool {
    true
}

/// Model shape and routing settings as they appear in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Train the plain sequential stack instead of the routed model.
    #[serde(default)]
    pub baseline: bool,
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub iterations: usize,
    pub d: usize,
    pub ff: usize,
    pub heads: usize,
    /// One kind per layer: `inputs` input embeddings, then the hidden
    /// blocks, then `outputs` output heads.
    pub blocks: Vec<BlockKind>,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_alpha_rate")]
    pub alpha_rate: f64,
    #[serde(default)]
    pub topk: Option<usize>,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Trace rendering settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// Minimum mean connection weight for an edge to appear in DOT output.
    pub threshold: f64,
    /// Examples to record per condition when tracing.
    pub examples: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self { threshold: 0.5, examples: 8 }
    }
}

/// A complete run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub trace: TraceSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |detail: String| Err(Error::Contract { op: "run_config", detail });
        let total = m.inputs + m.hidden + m.outputs;
        if m.blocks.len() != total {
            return fail(format!(
                "blocks lists {} kinds for {} layers ({} inputs + {} hidden + {} outputs)",
                m.blocks.len(),
                total,
                m.inputs,
                m.hidden,
                m.outputs
            ));
        }
        for (i, kind) in m.blocks.iter().enumerate() {
            let ok = if i < m.inputs {
                *kind == BlockKind::InputEmbedding
            } else if i < m.inputs + m.hidden {
                matches!(kind, BlockKind::Transformer | BlockKind::FeedForward)
            } else {
                *kind == BlockKind::OutputHead
            };
            if !ok {
                return fail(format!("layer {i} cannot be a {kind:?} at that position"));
            }
        }
        if m.baseline {
            if m.inputs != 1 || m.outputs != 1 {
                return fail("the baseline stack has exactly one input and one output".into());
            }
            if self.hidden_kinds().iter().any(|k| *k != BlockKind::Transformer) {
                return fail("the baseline stack supports transformer hidden layers only".into());
            }
        }
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.trace.threshold) {
            return fail(format!("trace threshold must lie in [0, 1], got {}", self.trace.threshold));
        }
        if self.trace.examples == 0 {
            return fail("trace needs at least one example per condition".into());
        }
        // Shape checks that need the task (vocabulary, sequence length).
        let task = self.task.build()?;
        self.hmodel_config(&task)?.validate()?;
        Ok(())
    }

    pub fn hidden_kinds(&self) -> Vec<BlockKind> {
        let m = &self.model;
        m.blocks[m.inputs..m.inputs + m.hidden].to_vec()
    }

    /// The routed-model config with vocabulary and sequence length taken
    /// from the task.
    pub fn hmodel_config(&self, task: &Task) -> Result<HModelConfig> {
        let m = &self.model;
        Ok(HModelConfig {
            inputs: m.inputs,
            hidden: m.hidden,
            outputs: m.outputs,
            iterations: m.iterations,
            block: BlockConfig {
                d: m.d,
                ff: m.ff,
                heads: m.heads,
                seq: task.seq(),
                vocab: task.vocab(),
            },
            alpha0: m.alpha0,
            alpha_rate: m.alpha_rate,
            topk: m.topk,
        })
    }

    /// Build the task and the network it trains.
    pub fn build(&self) -> Result<(AnyNetwork, Task)> {
        self.validate()?;
        let task = self.task.build()?;
        let head = if task.per_position() {
            HeadMode::TokenLogits
        } else {
            HeadMode::LastPositionClasses
        };
        let net = if self.model.baseline {
            let block = BlockConfig {
                d: self.model.d,
                ff: self.model.ff,
                heads: self.model.heads,
                seq: task.seq(),
                vocab: task.vocab(),
            };
            AnyNetwork::Stacked(StackedModel::new(
                self.model.hidden,
                block,
                head,
                task.out_dim(),
                self.model.causal,
                self.model.seed,
            )?)
        } else {
            let cfg = self.hmodel_config(&task)?;
            AnyNetwork::Routed(HModel::new(
                cfg,
                &self.hidden_kinds(),
                head,
                task.out_dim(),
                self.model.causal,
                self.model.seed,
            )?)
        };
        Ok((net, task))
    }

    /// Canonical JSON form, used for checkpoints and fingerprints.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a config file, naming the file in any error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wrap = |detail: String| Error::Config { path: path.display().to_string(), detail };
        let text = fs::read_to_string(path).map_err(|e| wrap(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| wrap(e.to_string()))?;
        cfg.validate().map_err(|e| wrap(e.to_string()))?;
        Ok(cfg)
    }

    /// Stable hex fingerprint of the canonical JSON form.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint_bytes(self.to_json()?.as_bytes()))
    }
}

/// FNV-1a 64-bit hash, hex encoded.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Either network a config can describe, trained through one interface.
pub enum AnyNetwork {
    Routed(HModel<f32>),
    Stacked(StackedModel<f32>),
}

impl AnyNetwork {
    /// Override the inference-time sparsification. Fails on the baseline,
    /// which has no routing to sparsify.
    pub fn set_topk(&mut self, topk: Option<usize>) -> Result<()> {
        match self {
            AnyNetwork::Routed(m) => m.set_topk(topk),
            AnyNetwork::Stacked(_) => Err(Error::Contract {
                op: "set_topk",
                detail: "the baseline stack has no routing weights".into(),
            }),
        }
    }

    /// Override the starting routing temperature. Fails on the baseline.
    pub fn set_alpha0(&mut self, alpha0: f64) -> Result<()> {
        match self {
            AnyNetwork::Routed(m) => m.set_alpha0(alpha0),
            AnyNetwork::Stacked(_) => Err(Error::Contract {
                op: "set_alpha0",
                detail: "the baseline stack has no routing temperature".into(),
            }),
        }
    }

    /// Override the per-iteration temperature decay. Fails on the baseline.
    pub fn set_alpha_rate(&mut self, rate: f64) -> Result<()> {
        match self {
            AnyNetwork::Routed(m) => m.set_alpha_rate(rate),
            AnyNetwork::Stacked(_) => Err(Error::Contract {
                op: "set_alpha_rate",
                detail: "the baseline stack has no routing temperature".into(),
            }),
        }
    }

    pub fn routed(&self) -> Option<&HModel<f32>> {
        match self {
            AnyNetwork::Routed(m) => Some(m),
            AnyNetwork::Stacked(_) => None,
        }
    }
}

impl Network for AnyNetwork {
    fn graph(&self) -> &Graph<f32> {
        match self {
            AnyNetwork::Routed(m) => m.graph(),
            AnyNetwork::Stacked(m) => m.graph(),
        }
    }

    fn graph_mut(&mut self) -> &mut Graph<f32> {
        match self {
            AnyNetwork::Routed(m) => m.graph_mut(),
            AnyNetwork::Stacked(m) => m.graph_mut(),
        }
    }

    fn named_params(&self) -> Vec<(String, TensorId)> {
        match self {
            AnyNetwork::Routed(m) => m.named_params(),
            AnyNetwork::Stacked(m) => m.named_params(),
        }
    }

    fn forward_logits(
        &mut self,
        batch: &TokenBatch,
        mode: Mode,
        trace: Option<&mut TraceHook<'_>>,
    ) -> Result<TensorId> {
        match self {
            AnyNetwork::Routed(m) => m.forward_logits(batch, mode, trace),
            AnyNetwork::Stacked(m) => m.forward_logits(batch, mode, trace),
        }
    }

    fn routing_alpha(&self) -> Option<f64> {
        match self {
            AnyNetwork::Routed(m) => m.routing_alpha(),
            AnyNetwork::Stacked(m) => m.routing_alpha(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_config() -> RunConfig {
        RunConfig {
            model: ModelSection {
                baseline: false,
                inputs: 1,
                hidden: 2,
                outputs: 1,
                iterations: 2,
                d: 16,
                ff: 32,
                heads: 2,
                blocks: vec![
                    BlockKind::InputEmbedding,
                    BlockKind::Transformer,
                    BlockKind::FeedForward,
                    BlockKind::OutputHead,
                ],
                alpha0: 1.0,
                alpha_rate: 0.7,
                topk: None,
                causal: true,
                seed: 7,
            },
            task: TaskSpec::Chain { symbols: 8, depth: 1, seq: 12, seed: 3 },
            train: TrainConfig::default(),
            trace: TraceSection::default(),
        }
    }

    #[test]
    fn valid_config_builds_a_routed_network() {
        let cfg = chain_config();
        cfg.validate().unwrap();
        let (net, task) = cfg.build().unwrap();
        assert!(net.routed().is_some());
        assert_eq!(task.vocab(), 13);
        assert_eq!(net.routing_alpha(), Some(1.0));
    }

    #[test]
    fn baseline_flag_builds_the_stack() {
        let mut cfg = chain_config();
        cfg.model.baseline = true;
        cfg.model.blocks = vec![
            BlockKind::InputEmbedding,
            BlockKind::Transformer,
            BlockKind::Transformer,
            BlockKind::OutputHead,
        ];
        let (net, _) = cfg.build().unwrap();
        assert!(net.routed().is_none());
        assert_eq!(net.routing_alpha(), None);

        let mut bad = cfg.clone();
        bad.model.blocks[2] = BlockKind::FeedForward;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn block_list_must_match_positions() {
        let mut cfg = chain_config();
        cfg.model.blocks.swap(0, 1);
        assert!(cfg.validate().is_err());
        let mut cfg = chain_config();
        cfg.model.blocks.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_named_in_the_error()  {
        let json = r#"{
            "model": {"inputs": 1, "hidden": 1, "outputs": 1, "iterations": 1,
                      "d": 8, "ff": 16, "heads": 2, "learning_rate": 0.1,
                      "blocks": ["input-embedding", "transformer", "output-head"]},
            "task": {"kind": "chain", "symbols": 8, "depth": 1, "seq": 12, "seed": 3}
        }"#;
        let err = RunConfig::from_json(json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "error should name the bad field: {msg}");
    }

    #[test]
    fn json_round_trip_preserves_the_config() {
        let cfg = chain_config();
        let json = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn fingerprints_track_content() {
        let cfg = chain_config();
        let a = cfg.fingerprint().unwrap();
        let b = cfg.fingerprint().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let mut other = chain_config();
        other.model.seed = 8;
        assert_ne!(a, other.fingerprint().unwrap());
    }

    #[test]
    fn load_names_the_file_on_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, "{not json").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("run.json"));

        std::fs::write(&path, chain_config().to_json().unwrap()).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, chain_config());
    }

    #[test]
    fn seq_too_small_for_the_task_is_caught() {
        let mut cfg = chain_config();
        // A depth-3 chain needs 16 tokens.
        cfg.task = TaskSpec::Chain { symbols: 12, depth: 3, seq: 12, seed: 3 };
        assert!(cfg.validate().is_err());
    }
}
