//! Crate-wide error type.
//!
//! Every fallible operation in the crate funnels into [`Error`]. Numeric
//! trouble (a NaN or infinity escaping a kernel) is an error, not a panic,
//! so callers can abort a run cleanly and keep the last good state.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape was structurally invalid (zero dimension, wrong rank, ...).
    #[error("{op}: bad shape {shape:?}: {detail}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// An index (tensor id, axis, row, token id, ...) was out of range.
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// Input left the mathematical domain of the operation.
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A kernel produced a NaN or infinity.
    #[error("non-finite value produced by {op}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    /// An API contract was violated (caller misuse rather than bad data).
    #[error("{op}: contract violated: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A gradient became non-finite during an optimizer step.
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    /// Training loss left the finite range; the run was aborted.
    #[error("training diverged at step {step} (loss became non-finite){}", last_good.as_ref().map(|p| format!("; last good checkpoint at {p}")).unwrap_or_default())]
    Diverged {
        step: usize,
        last_good: Option<String>,
    },

    /// Checkpoint file carries a version this build does not read.
    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint file is malformed or truncated.
    #[error("corrupt checkpoint: {detail}")]
    CorruptCheckpoint { detail: String },

    /// A configuration value failed validation. `path` names the field.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach human-readable context (which stage, which layer) to a
    /// non-finite error as it bubbles out of a forward pass.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::NonFinite { op, .. } => Error::NonFinite {
                op,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }
}
