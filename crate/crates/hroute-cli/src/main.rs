//! Command-line front end: train a configured model, evaluate or trace a
//! checkpoint, and run the verification suites.
//!
//! Exit codes: 0 on success, 1 on runtime or verification failure, 2 on
//! configuration errors. Logging is controlled by the `HROUTE_LOG`
//! environment variable (`error`, `info`, `debug`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hroute::check::verify_suite;
use hroute::checkpoint::Checkpoint;
use hroute::config::{AnyNetwork, RunConfig};
use hroute::model::{Mode, Network, TraceHook};
use hroute::tasks::Task;
use hroute::trace::{
    export_dot, export_json, summarize, TraceFile, TraceRecorder, TRACE_VERSION,
};
use hroute::train::{evaluate, eval_index, train, TrainSinks};

#[derive(Parser)]
#[command(
    name = "hroute",
    version,
    about = "Train, evaluate and inspect dynamically routed layer models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model described by a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its task's held-out stream.
    Eval(EvalArgs),
    /// Record routing traces of a checkpoint and export them.
    Trace(TraceArgs),
    /// Run a numeric verification suite.
    Verify(VerifyArgs),
}

/// Flags that override config values at runtime.
#[derive(Args, Clone)]
struct Overrides {
    /// Replace the model and task seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only the K largest connection weights per vector at inference.
    #[arg(long, value_name = "K")]
    topk: Option<usize>,
    /// Starting routing temperature.
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,
    /// Per-iteration routing temperature decay.
    #[arg(long, value_name = "F")]
    alpha_rate: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory for metrics.jsonl and model.hmck.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Evaluate under this config instead of the checkpoint's snapshot.
    /// The model shape must match the stored parameters.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Held-out batches to evaluate.
    #[arg(long, default_value_t = 16)]
    batches: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TraceArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Trace under this config instead of the checkpoint's snapshot.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for trace.json and the per-condition DOT files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Examples to record per condition (default from the config).
    #[arg(long, value_name = "N")]
    examples: Option<usize>,
    /// Minimum mean weight for a DOT edge (default from the config).
    #[arg(long, value_name = "F")]
    threshold: Option<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Equiv,
    Norm,
    Topk,
    All,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Equiv => "equiv",
            Suite::Norm => "norm",
            Suite::Topk => "topk",
            Suite::All => "all",
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Which property suite to run.
    #[arg(value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failures split by exit code: configuration problems exit 2,
/// everything else exits 1.
enum CmdError {
    Config(String),
    Runtime(String),
    /// A verification suite ran but reported failures.
    VerifyFailed,
}

impl From<hroute::Error> for CmdError {
    fn from(e: hroute::Error) -> Self {
        match e {
            hroute::Error::Config { .. } => CmdError::Config(e.to_string()),
            other => CmdError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HROUTE_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Trace(args) => cmd_trace(args),
        Cmd::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CmdError::VerifyFailed) => ExitCode::from(1),
    }
}

/// Load a config and fold the override flags into it. Any failure here is
/// a configuration error.
fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig, CmdError> {
    let mut cfg = RunConfig::load(path).map_err(|e| CmdError::Config(e.to_string()))?;
    apply_overrides(&mut cfg, ov)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) -> Result<(), CmdError> {
    if let Some(seed) = ov.seed {
        cfg.model.seed = seed;
        cfg.task = cfg.task.clone().with_seed(seed);
    }
    if let Some(k) = ov.topk {
        cfg.model.topk = Some(k);
    }
    if let Some(a) = ov.alpha {
        cfg.model.alpha0 = a;
    }
    if let Some(r) = ov.alpha_rate {
        cfg.model.alpha_rate = r;
    }
    cfg.validate().map_err(|e| CmdError::Config(e.to_string()))
}

fn cmd_train(args: TrainArgs) -> Result<(), CmdError> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let (mut net, task) = cfg.build()?;
    let config_json = cfg.to_json()?;
    fs::create_dir_all(&args.out).map_err(hroute::Error::from)?;

    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(hroute::Error::from)?;
    log::info!("training for {} steps on `{}`", cfg.train.steps, args.config.display());
    let mut sinks = TrainSinks {
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(&args.out),
    };
    let outcome = train(&mut net, &task, &cfg.train, &config_json, &mut sinks)?;

    let model_path = args.out.join("model.hmck");
    outcome.checkpoint.save(&model_path)?;
    log::info!("wrote {} and {}", metrics_path.display(), model_path.display());
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.steps_run,
            "stopped_early": outcome.stopped_early,
            "eval_loss": outcome.final_eval.loss,
            "eval_accuracy": outcome.final_eval.accuracy,
            "checkpoint": model_path.display().to_string(),
        })
    );
    Ok(())
}

/// Rebuild the network a checkpoint was trained as and restore its
/// parameters. An explicit config replaces the embedded snapshot.
fn load_network(
    checkpoint: &Path,
    config: Option<&Path>,
    ov: &Overrides,
) -> Result<(AnyNetwork, Task, RunConfig), CmdError> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = match config {
        Some(path) => RunConfig::load(path).map_err(|e| CmdError::Config(e.to_string()))?,
        None => RunConfig::from_json(&ck.config_json)
            .map_err(|e| CmdError::Config(format!("embedded config snapshot: {e}")))?,
    };
    apply_overrides(&mut cfg, ov)?;
    let (mut net, task) = cfg.build()?;
    let params = net.named_params();
    ck.restore(net.graph_mut(), &params)?;
    Ok((net, task, cfg))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    let (mut net, task, cfg) = load_network(&args.checkpoint, args.config.as_deref(), &args.overrides)?;
    let stats = evaluate(&mut net, &task, cfg.train.batch, args.batches, None)?;
    println!(
        "{}",
        serde_json::json!({
            "loss": stats.loss,
            "accuracy": stats.accuracy,
            "batches": args.batches,
            "alpha": net.routing_alpha(),
            "topk": cfg.model.topk,
        })
    );
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), CmdError> {
    let (mut net, task, cfg) = load_network(&args.checkpoint, args.config.as_deref(), &args.overrides)?;
    if net.routed().is_none() {
        return Err(CmdError::Runtime("the baseline stack has no routing to trace".into()));
    }
    let per_condition = args.examples.unwrap_or(cfg.trace.examples);
    let threshold = args.threshold.unwrap_or(cfg.trace.threshold);
    if per_condition == 0 {
        return Err(CmdError::Config("need at least one example per condition".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CmdError::Config(format!("threshold must lie in [0, 1], got {threshold}")));
    }

    // Draw held-out batches until every condition has enough examples.
    let conditions = task.conditions();
    let mut recorder = TraceRecorder::new();
    let mut batch_idx = 0usize;
    loop {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in recorder.records() {
            *counts.entry(r.condition.as_str()).or_default() += 1;
        }
        if conditions.iter().all(|c| counts.get(c.as_str()).copied().unwrap_or(0) >= per_condition) {
            break;
        }
        if batch_idx >= 10_000 {
            return Err(CmdError::Runtime(format!(
                "drew {batch_idx} batches without seeing {per_condition} examples of every condition"
            )));
        }
        let batch = task.batch(cfg.train.batch, eval_index(batch_idx))?;
        recorder.begin_batch(&batch.conditions);
        let mut hook = TraceHook::new(&mut recorder);
        net.forward_logits(&batch.tokens, Mode::Infer, Some(&mut hook))?;
        batch_idx += 1;
    }

    // Keep the first `per_condition` examples of each condition.
    let mut kept_counts: BTreeMap<String, usize> = BTreeMap::new();
    let records: Vec<_> = recorder
        .into_records()
        .into_iter()
        .filter(|r| {
            let c = kept_counts.entry(r.condition.clone()).or_default();
            *c += 1;
            *c <= per_condition
        })
        .collect();

    fs::create_dir_all(&args.out).map_err(hroute::Error::from)?;
    let file = TraceFile {
        version: TRACE_VERSION,
        model_config_hash: cfg.fingerprint()?,
        records,
    };
    let json_path = args.out.join("trace.json");
    let mut w = fs::File::create(&json_path).map_err(hroute::Error::from)?;
    export_json(&mut w, &file)?;

    let summaries = summarize(&file.records)?;
    let mut dot_paths = Vec::new();
    for (condition, summary) in &summaries {
        let dot = export_dot(summary, cfg.model.hidden, threshold)?;
        let path = args.out.join(format!("trace-{condition}.dot"));
        fs::write(&path, dot).map_err(hroute::Error::from)?;
        dot_paths.push(path.display().to_string());
    }
    log::info!("wrote {} and {} DOT files", json_path.display(), dot_paths.len());
    println!(
        "{}",
        serde_json::json!({
            "records": file.records.len(),
            "conditions": summaries.len(),
            "json": json_path.display().to_string(),
            "dot": dot_paths,
        })
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CmdError> {
    let lines = verify_suite(args.suite.name(), args.seed)?;
    let mut all_pass = true;
    let mut out = std::io::stdout().lock();
    for line in &lines {
        let verdict = if line.pass { "PASS" } else { "FAIL" };
        all_pass &= line.pass;
        let _ = writeln!(out, "{verdict} {} ({})", line.name, line.detail);
    }
    drop(out);
    if all_pass {
        Ok(())
    } else {
        Err(CmdError::VerifyFailed)
    }
}
