//! Recording, summarizing and exporting routing decisions.
//!
//! A forward pass hands every connection-weight vector it computes to a
//! [`TraceRecorder`]; one [`TraceRecord`] per example accumulates the
//! weights of every (stage, source) pair. Stage 0 is the input stage, stage
//! `t + 1` holds the weights emitted during iteration `t`. The recorded
//! weights are the effective ones: if top-k sparsification is active, the
//! zeroed entries appear as zeros.
//!
//! Summaries group records by condition (task label, language, ...) and
//! reduce them to per-coordinate means and standard deviations, which feed
//! divergence measures, nearest-centroid classification, and Graphviz/JSON
//! export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Current version of the JSON trace schema.
pub const TRACE_VERSION: u32 = 1;

/// Connection weights of one (stage, source) pair for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: usize,
    pub source: usize,
    pub con: Vec<f64>,
}

/// Complete routing decision record of a single example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: usize,
    pub condition: String,
    pub stages: Vec<StageEntry>,
}

impl TraceRecord {
    /// All connection weights flattened in stage order.
    pub fn flat(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.con.iter().copied()).collect()
    }

    fn layout(&self) -> Vec<(usize, usize, usize)> {
        self.stages.iter().map(|s| (s.stage, s.source, s.con.len())).collect()
    }
}

/// Collects per-example routing decisions across forward passes.
#[derive(Clone, Debug, Default)]
pub struct TraceRecorder {
    records: Vec<TraceRecord>,
    batch_start: usize,
    batch_len: usize,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Open a fresh batch of examples, one record per condition entry.
    pub fn begin_batch(&mut self, conditions: &[String]) {
        self.batch_start = self.records.len();
        self.batch_len = conditions.len();
        for c in conditions {
            self.records.push(TraceRecord {
                id: self.records.len(),
                condition: c.clone(),
                stages: Vec::new(),
            });
        }
    }

    /// Append the connection weights of one (stage, source) pair. `con` is
    /// the row-major `[batch, slots]` matrix produced by the forward pass.
    pub fn record_stage<R: Real>(
        &mut self,
        stage: usize,
        source: usize,
        con: &[R],
        slots: usize,
    ) -> Result<()> {
        if self.batch_len == 0 || con.len() != self.batch_len * slots {
            return Err(Error::Contract {
                op: "record_stage",
                detail: format!(
                    "got {} weights for batch {} x {} slots (did begin_batch run?)",
                    con.len(),
                    self.batch_len,
                    slots
                ),
            });
        }
        for e in 0..self.batch_len {
            let row = &con[e * slots..(e + 1) * slots];
            self.records[self.batch_start + e].stages.push(StageEntry {
                stage,
                source,
                con: row.iter().map(|&v| Real::to_f64(v)).collect(),
            });
        }
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }
}

/// Per-condition first and second moments of the routing decisions.
#[derive(Clone, Debug)]
pub struct RoutingSummary {
    pub condition: String,
    pub count: usize,
    /// (stage, source) pairs in record order.
    pub layout: Vec<(usize, usize)>,
    /// Routable slots per entry.
    pub slots: usize,
    /// Mean connection weight per (layout entry, slot), row-major.
    pub mean: Vec<f64>,
    /// Population standard deviation per coordinate.
    pub std: Vec<f64>,
}

impl RoutingSummary {
    /// Iterations covered by this summary (highest stage index).
    pub fn iterations(&self) -> usize {
        self.layout.iter().map(|&(s, _)| s).max().unwrap_or(0)
    }

    /// Input layers (sources at stage 0).
    pub fn input_sources(&self) -> usize {
        self.layout.iter().filter(|&&(s, _)| s == 0).count()
    }

    /// Hidden layers (sources at iteration stages).
    pub fn hidden_sources(&self) -> usize {
        self.layout.iter().filter(|&&(s, _)| s == 1).count()
    }
}

/// Mean of the per-coordinate standard deviations: how much routing varies
/// across examples of one condition.
pub fn dispersion(summary: &RoutingSummary) -> f64 {
    if summary.std.is_empty() {
        return 0.0;
    }
    summary.std.iter().sum::<f64>() / summary.std.len() as f64
}

/// Group records by condition and reduce to mean/std summaries.
/// All records must share one (stage, source, slots) layout.
pub fn summarize(records: &[TraceRecord]) -> Result<BTreeMap<String, RoutingSummary>> {
    let Some(first) = records.first() else {
        return Ok(BTreeMap::new());
    };
    let layout = first.layout();
    let slots = first.stages.first().map(|s| s.con.len()).unwrap_or(0);
    if layout.iter().any(|&(_, _, l)| l != slots) {
        return Err(Error::Contract {
            op: "summarize",
            detail: "records carry entries of differing widths".into(),
        });
    }
    let width = layout.len() * slots;

    let mut sums: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in records {
        if rec.layout() != layout {
            return Err(Error::Contract {
                op: "summarize",
                detail: format!("record {} has a different stage layout", rec.id),
            });
        }
        let entry = sums
            .entry(rec.condition.clone())
            .or_insert_with(|| (0, vec![0.0; width], vec![0.0; width]));
        entry.0 += 1;
        for (i, v) in rec.flat().into_iter().enumerate() {
            entry.1[i] += v;
            entry.2[i] += v * v;
        }
    }

    let mut out = BTreeMap::new();
    for (condition, (count, sum, sumsq)) in sums {
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        out.insert(
            condition.clone(),
            RoutingSummary {
                condition,
                count,
                layout: layout.iter().map(|&(s, src, _)| (s, src)).collect(),
                slots,
                mean,
                std,
            },
        );
    }
    Ok(out)
}

/// Mean absolute difference between two summaries' mean matrices.
pub fn routing_divergence(a: &RoutingSummary, b: &RoutingSummary) -> Result<f64> {
    if a.layout != b.layout || a.slots != b.slots {
        return Err(Error::Contract {
            op: "routing_divergence",
            detail: "summaries have different layouts".into(),
        });
    }
    if a.mean.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.mean.len() as f64)
}

/// Assign a record to the condition whose mean routing is nearest in L1
/// distance. Exact ties resolve to the lowest-ordered condition name, which
/// is the iteration order of the map.
pub fn classify_by_routing(
    record: &TraceRecord,
    summaries: &BTreeMap<String, RoutingSummary>,
) -> Result<String> {
    if summaries.is_empty() {
        return Err(Error::Contract {
            op: "classify_by_routing",
            detail: "no summaries to classify against".into(),
        });
    }
    let flat = record.flat();
    let mut best: Option<(f64, &str)> = None;
    for (name, summary) in summaries {
        if summary.mean.len() != flat.len() {
            return Err(Error::Contract {
                op: "classify_by_routing",
                detail: format!("record width {} does not match summary `{name}`", flat.len()),
            });
        }
        let dist: f64 = summary.mean.iter().zip(&flat).map(|(m, v)| (m - v).abs()).sum();
        let better = match best {
            None => true,
            Some((d, _)) => dist < d,
        };
        if better {
            best = Some((dist, name));
        }
    }
    Ok(best.expect("non-empty summaries").1.to_string())
}

/// Render a summary as a Graphviz digraph. Nodes are the input layers, one
/// replica of each hidden layer per iteration, and the output slots. An
/// edge appears wherever the mean connection weight reaches `threshold`;
/// its `weight` attribute carries the mean. Edges from the final stage to
/// hidden slots are omitted: those slots are never consumed.
///
/// `hidden` is the number of leading slots that feed hidden layers; the
/// record layout alone cannot tell the split when there are no iteration
/// stages.
pub fn export_dot(summary: &RoutingSummary, hidden: usize, threshold: f64) -> Result<String> {
    if hidden > summary.slots {
        return Err(Error::Contract {
            op: "export_dot",
            detail: format!("{hidden} hidden slots exceed the {} recorded", summary.slots),
        });
    }
    let iterations = summary.iterations();
    if iterations > 0 && summary.hidden_sources() != hidden {
        return Err(Error::Contract {
            op: "export_dot",
            detail: format!(
                "{hidden} hidden slots but {} sources per iteration stage",
                summary.hidden_sources()
            ),
        });
    }
    let outputs = summary.slots - hidden;
    let inputs = summary.input_sources();

    let mut dot = String::new();
    dot.push_str("digraph routing {\n  rankdir=LR;\n");
    for i in 0..inputs {
        let _ = writeln!(dot, "  \"in{i}\" [shape=box];");
    }
    for t in 0..iterations {
        for i in 0..hidden {
            let _ = writeln!(dot, "  \"h{i}@t{t}\";");
        }
    }
    for k in 0..outputs {
        let _ = writeln!(dot, "  \"out{k}\" [shape=doublecircle];");
    }
    for (entry_idx, &(stage, source)) in summary.layout.iter().enumerate() {
        let src = if stage == 0 {
            format!("in{source}")
        } else {
            format!("h{source}@t{}", stage - 1)
        };
        for j in 0..summary.slots {
            let w = summary.mean[entry_idx * summary.slots + j];
            if w < threshold {
                continue;
            }
            let dst = if j < hidden {
                if stage >= iterations {
                    // Hidden slots filled by the last stage are dead ends.
                    continue;
                }
                format!("h{j}@t{stage}")
            } else {
                format!("out{}", j - hidden)
            };
            let _ = writeln!(dot, "  \"{src}\" -> \"{dst}\" [weight={w:.6}, label=\"{w:.2}\"];");
        }
    }
    dot.push_str("}\n");
    Ok(dot)
}

/// On-disk JSON trace bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub version: u32,
    pub model_config_hash: String,
    pub records: Vec<TraceRecord>,
}

pub fn export_json(mut w: impl Write, file: &TraceFile) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, file)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn import_json(r: impl Read) -> Result<TraceFile> {
    let file: TraceFile = serde_json::from_reader(r)?;
    if file.version != TRACE_VERSION {
        return Err(Error::Contract {
            op: "import_json",
            detail: format!("trace version {} not supported (expected {TRACE_VERSION})", file.version),
        });
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, condition: &str, values: [f64; 2]) -> TraceRecord {
        TraceRecord {
            id,
            condition: condition.into(),
            stages: vec![
                StageEntry { stage: 0, source: 0, con: vec![values[0], values[1]] },
                StageEntry { stage: 1, source: 0, con: vec![values[1], values[0]] },
            ],
        }
    }

    #[test]
    fn recorder_builds_one_record_per_example() {
        let mut r = TraceRecorder::new();
        r.begin_batch(&["a".into(), "b".into()]);
        r.record_stage(0, 0, &[0.1f32, 0.2, 0.3, 0.4], 2).unwrap();
        r.record_stage(1, 0, &[0.5f32, 0.6, 0.7, 0.8], 2).unwrap();
        let recs = r.records();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].condition, "a");
        assert_eq!(recs[0].stages.len(), 2);
        assert!((recs[1].stages[0].con[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn recorder_rejects_mismatched_batch() {
        let mut r = TraceRecorder::new();
        assert!(r.record_stage(0, 0, &[0.0f32], 1).is_err());
        r.begin_batch(&["a".into()]);
        assert!(r.record_stage(0, 0, &[0.0f32, 0.0], 1).is_err());
    }

    #[test]
    fn summaries_carry_exact_means() {
        let records = vec![rec(0, "x", [0.0, 1.0]), rec(1, "x", [1.0, 0.0]), rec(2, "y", [0.5, 0.5])];
        let sums = summarize(&records).unwrap();
        assert_eq!(sums.len(), 2);
        let x = &sums["x"];
        assert_eq!(x.count, 2);
        assert_eq!(x.mean, vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(x.std, vec![0.5, 0.5, 0.5, 0.5]);
        let y = &sums["y"];
        assert_eq!(y.std, vec![0.0, 0.0, 0.0, 0.0]);
        assert_eq!(dispersion(y), 0.0);
    }

    #[test]
    fn summarize_rejects_mixed_layouts() {
        let mut bad = rec(1, "x", [0.0, 1.0]);
        bad.stages.pop();
        assert!(summarize(&[rec(0, "x", [0.0, 1.0]), bad]).is_err());
    }

    #[test]
    fn divergence_is_mean_absolute_difference() {
        let sums = summarize(&[rec(0, "x", [0.0, 1.0]), rec(1, "y", [1.0, 0.0])]).unwrap();
        let d = routing_divergence(&sums["x"], &sums["y"]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let d = routing_divergence(&sums["x"], &sums["x"]).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn classification_picks_nearest_and_breaks_ties_low() {
        let sums = summarize(&[rec(0, "a", [0.0, 0.0]), rec(1, "b", [1.0, 1.0])]).unwrap();
        let probe = rec(9, "?", [0.1, 0.1]);
        assert_eq!(classify_by_routing(&probe, &sums).unwrap(), "a");
        // Equidistant probe resolves to the lowest-ordered condition.
        let probe = rec(9, "?", [0.5, 0.5]);
        assert_eq!(classify_by_routing(&probe, &sums).unwrap(), "a");
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let file = TraceFile {
            version: TRACE_VERSION,
            model_config_hash: "abc123".into(),
            records: vec![rec(0, "x", [0.12345678901234567, 0.9])],
        };
        let mut buf = Vec::new();
        export_json(&mut buf, &file).unwrap();
        let back = import_json(buf.as_slice()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn import_rejects_future_versions_and_garbage() {
        let bad = r#"{"version": 99, "model_config_hash": "x", "records": []}"#;
        assert!(import_json(bad.as_bytes()).is_err());
        assert!(import_json(b"not json".as_slice()).is_err());
    }

    #[test]
    fn dot_export_contains_nodes_and_thresholded_edges() {
        let sums = summarize(&[rec(0, "x", [0.9, 0.1])]).unwrap();
        let dot = export_dot(&sums["x"], 1, 0.5).unwrap();
        assert!(dot.starts_with("digraph routing {"));
        assert!(dot.contains("\"in0\""));
        assert!(dot.contains("\"h0@t0\""));
        assert!(dot.contains("\"out0\""));
        // Stage-0 weight 0.9 to slot 0 (hidden) survives the threshold.
        assert!(dot.contains("\"in0\" -> \"h0@t0\""));
        // Above any weight, only nodes remain.
        let bare = export_dot(&sums["x"], 1, 1.01).unwrap();
        assert!(!bare.contains("->"));
        assert!(bare.contains("\"in0\""));
        // A hidden count that clashes with the stage layout is rejected.
        assert!(export_dot(&sums["x"], 2, 0.5).is_err());
    }
}
