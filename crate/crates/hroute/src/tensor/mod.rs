//! Dense tensors and a recording autodiff graph.
//!
//! Everything in the crate computes on row-major `Vec`-backed tensors whose
//! element type is a [`Real`]. Production code runs on `f32`; the gradient
//! verification path instantiates the very same kernels at `f64` so that
//! finite-difference oracles are not drowned in single-precision noise.
//!
//! The autodiff design is a Wengert list: a [`Graph`] owns every tensor it
//! has produced, each op appends one node, and `backward` walks the tape in
//! reverse recording order exactly once. Kernels reduce in a single fixed
//! order, so identical inputs give bitwise identical outputs.

mod graph;
mod kernels;

pub use graph::{Graph, Tensor, TensorId};

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Number of elements implied by a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Validate that a shape has only positive dimensions.
pub fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            detail: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

/// Decide how two shapes combine elementwise.
///
/// Shapes combine when they are equal, or when the smaller one is a suffix
/// of the larger (the smaller operand is then tiled over the leading axes).
/// Returns the output shape and which side, if any, is the tiled one.
pub(crate) fn broadcast_shapes<'a>(
    op: &'static str,
    a: &'a [usize],
    b: &'a [usize],
) -> Result<(&'a [usize], BroadcastSide)> {
    if a == b {
        return Ok((a, BroadcastSide::None));
    }
    if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        return Ok((a, BroadcastSide::Rhs));
    }
    if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        return Ok((b, BroadcastSide::Lhs));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum BroadcastSide {
    /// Shapes equal; no tiling.
    None,
    /// Left operand is the smaller one and gets tiled.
    Lhs,
    /// Right operand is the smaller one and gets tiled.
    Rhs,
}

/// Split a shape around `axis` into (outer, lane, inner) extents so that the
/// element at (o, j, t) lives at flat index `(o * lane + j) * inner + t`.
pub(crate) fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}
