//! Dynamically routed layer blocks.
//!
//! `hroute` trains a pool of uniform-width layer blocks that decide, per
//! example and per iteration, how strongly to feed each other. Connection
//! weights come from small routing heads attached to every block, can be
//! sharpened with a temperature, sparsified with top-k at inference, or
//! pinned to a fixed plan (a plain sequential stack is one such plan).
//! Every forward pass can record its routing decisions for later analysis
//! and export.

pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};

// Every Rust snippet in the guide compiles and runs as a doc-test, so the
// book stays in sync with the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/sharpening.md")]
    mod sharpening {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/tracing.md")]
    mod tracing {}
}
