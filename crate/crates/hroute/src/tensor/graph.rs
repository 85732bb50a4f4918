//! The recording graph: every operation appends one node to a tape.
//!
//! Reverse-mode differentiation walks the tape backwards exactly once per
//! `backward` call. Parameters are persistent leaves created before
//! [`Graph::seal`]; activations recorded afterwards are discarded by
//! [`Graph::reset`] between steps while parameter ids stay valid.
//!
//! Invariants kept by this module:
//! * recording order is execution order, so reverse order is a valid
//!   topological order for backpropagation;
//! * no op mutates an existing node, outputs are always fresh nodes;
//! * every kernel reduces in one fixed order (bitwise reproducibility);
//! * every op output is scanned for NaN/infinity and surfaced as an error.

use super::kernels;
use super::{broadcast_shapes, check_shape, lane_split, numel, BroadcastSide, Real};
use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

/// A dense row-major tensor together with its autodiff bookkeeping.
#[derive(Clone, Debug)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn data(&self) -> &[R] {
        &self.data
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }
}

/// One recorded operation. Holds operand ids plus whatever the backward
/// rule needs that would be awkward to recompute.
#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Add { a: TensorId, b: TensorId, side: BroadcastSide },
    Sub { a: TensorId, b: TensorId, side: BroadcastSide },
    Mul { a: TensorId, b: TensorId, side: BroadcastSide },
    Scale { a: TensorId, factor: R },
    Matmul { a: TensorId, b: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    Sum { a: TensorId, axis: Option<usize> },
    Mean { a: TensorId, axis: Option<usize> },
    Max { a: TensorId, argmax: Vec<usize> },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, mean: Vec<R>, rstd: Vec<R> },
    Embedding { table: TensorId, ids: Vec<u32> },
    FirstRows { a: TensorId },
    LastPosition { a: TensorId },
    SliceColumn { a: TensorId, col: usize },
    SliceRow { a: TensorId, row: usize },
    Gate { x: TensorId, w: TensorId },
    NormByWeight { x: TensorId, w: TensorId },
    Reshape { a: TensorId },
    SwapAxes { a: TensorId, ax0: usize, ax1: usize },
    SparsifyTopK { a: TensorId, kept: Vec<usize> },
    CrossEntropy { logits: TensorId, targets: Vec<u32> },
}

/// Recording tape plus storage for every tensor it produced.
#[derive(Clone, Debug, Default)]
pub struct Graph<R> {
    nodes: Vec<Tensor<R>>,
    ops: Vec<Op<R>>,
    persistent: usize,
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), ops: Vec::new(), persistent: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mark every node recorded so far as persistent: [`Graph::reset`] will
    /// keep them. Called once after model parameters are created.
    pub fn seal(&mut self) {
        self.persistent = self.nodes.len();
    }

    /// Drop everything recorded after the last [`Graph::seal`]. Parameter
    /// ids handed out before sealing stay valid.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
        self.ops.truncate(self.persistent);
    }

    /// Clear accumulated gradients on all nodes.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn node(&self, op: &'static str, id: TensorId) -> Result<&Tensor<R>> {
        self.nodes.get(id.0).ok_or(Error::IndexOutOfRange {
            op,
            index: id.0,
            bound: self.nodes.len(),
        })
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        Ok(&self.node("shape", id)?.shape)
    }

    pub fn data(&self, id: TensorId) -> Result<&[R]> {
        Ok(&self.node("data", id)?.data)
    }

    pub fn grad(&self, id: TensorId) -> Result<Option<&[R]>> {
        Ok(self.node("grad", id)?.grad.as_deref())
    }

    /// Mutable view of a leaf's payload. Only meaningful for leaves, and
    /// only between tapes (an optimizer step, a checkpoint restore, a
    /// finite-difference probe); recorded ops never mutate nodes.
    pub fn data_mut(&mut self, id: TensorId) -> Result<&mut [R]> {
        if id.0 >= self.nodes.len() {
            return Err(Error::IndexOutOfRange { op: "data_mut", index: id.0, bound: self.nodes.len() });
        }
        debug_assert!(matches!(self.ops[id.0], Op::Leaf), "only leaves may be mutated");
        Ok(&mut self.nodes[id.0].data)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<R>,
        requires_grad: bool,
        op: Op<R>,
    ) -> Result<TensorId> {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: shape/data mismatch");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name, context: None });
        }
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(op);
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, data: Vec<R>, shape: Vec<usize>) -> Result<TensorId> {
        check_shape("param", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::BadShape {
                op: "param",
                shape,
                detail: format!("data length {} does not match", data.len()),
            });
        }
        self.push("param", shape, data, true, Op::Leaf)
    }

    /// Non-differentiable leaf (an input or a fixed routing weight).
    pub fn constant(&mut self, data: Vec<R>, shape: Vec<usize>) -> Result<TensorId> {
        check_shape("constant", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::BadShape {
                op: "constant",
                shape,
                detail: format!("data length {} does not match", data.len()),
            });
        }
        self.push("constant", shape, data, false, Op::Leaf)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(R, R) -> R,
        op: impl Fn(BroadcastSide) -> Op<R>,
    ) -> Result<TensorId> {
        self.node(name, a)?;
        self.node(name, b)?;
        let (out_shape, side) =
            broadcast_shapes(name, &self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let out_shape = out_shape.to_vec();
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data: Vec<R> = match side {
            BroadcastSide::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            BroadcastSide::Rhs => {
                let n = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
            }
            BroadcastSide::Lhs => {
                let n = av.len();
                bv.iter().enumerate().map(|(i, &y)| f(av[i % n], y)).collect()
            }
        };
        let rg = self.needs(&[a, b]);
        self.push(name, out_shape, data, rg, op(side))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, |side| Op::Add { a, b, side })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, |side| Op::Sub { a, b, side })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, |side| Op::Mul { a, b, side })
    }

    /// Multiply by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: TensorId, factor: R) -> Result<TensorId> {
        let n = self.node("scale", a)?;
        let shape = n.shape.clone();
        let data: Vec<R> = n.data.iter().map(|&x| x * factor).collect();
        let rg = self.needs(&[a]);
        self.push("scale", shape, data, rg, Op::Scale { a, factor })
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: TensorId,
        f: impl Fn(R) -> R,
        op: Op<R>,
    ) -> Result<TensorId> {
        let n = self.node(name, a)?;
        let shape = n.shape.clone();
        let data: Vec<R> = n.data.iter().map(|&x| f(x)).collect();
        let rg = self.needs(&[a]);
        self.push(name, shape, data, rg, op)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("relu", a, |x| if x > R::zero() { x } else { R::zero() }, Op::Relu { a })
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("exp", a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.node("log", a)?;
        if let Some(&bad) = n.data.iter().find(|v| **v <= R::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} is not positive"),
            });
        }
        self.unary("log", a, |x| x.ln(), Op::Log { a })
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Matrix product over the trailing two axes. The right operand is
    /// either rank 2 (shared across all leading batches of `a`) or has
    /// leading axes exactly equal to `a`'s.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.node("matmul", a)?;
        self.node("matmul", b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let batches = numel(lead);
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = vec![R::zero(); batches * m * n];
        for t in 0..batches {
            let a_t = &av[t * m * k..(t + 1) * m * k];
            let b_t = if shared_b { bv.as_slice() } else { &bv[t * k * n..(t + 1) * k * n] };
            kernels::mm_nn(a_t, b_t, &mut data[t * m * n..(t + 1) * m * n], m, k, n);
        }
        let rg = self.needs(&[a, b]);
        self.push("matmul", out_shape, data, rg, Op::Matmul { a, b })
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn reduce_shape(&self, name: &'static str, a: TensorId, axis: Option<usize>) -> Result<Vec<usize>> {
        let n = self.node(name, a)?;
        match axis {
            None => Ok(Vec::new()),
            Some(ax) => {
                if ax >= n.shape.len() {
                    return Err(Error::IndexOutOfRange { op: name, index: ax, bound: n.shape.len() });
                }
                let mut s = n.shape.clone();
                s.remove(ax);
                Ok(s)
            }
        }
    }

    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let out_shape = self.reduce_shape("sum", a, axis)?;
        let node = &self.nodes[a.0];
        let data = match axis {
            None => vec![node.data.iter().copied().sum::<R>()],
            Some(ax) => {
                let (outer, lane, inner) = lane_split(&node.shape, ax);
                let mut out = vec![R::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..lane {
                        for t in 0..inner {
                            out[o * inner + t] += node.data[(o * lane + j) * inner + t];
                        }
                    }
                }
                out
            }
        };
        let rg = self.needs(&[a]);
        self.push("sum", out_shape, data, rg, Op::Sum { a, axis })
    }

    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let out_shape = self.reduce_shape("mean", a, axis)?;
        let node = &self.nodes[a.0];
        let count = match axis {
            None => node.data.len(),
            Some(ax) => node.shape[ax],
        };
        let inv = R::one() / R::from_usize(count);
        let data = match axis {
            None => vec![node.data.iter().copied().sum::<R>() * inv],
            Some(ax) => {
                let (outer, lane, inner) = lane_split(&node.shape, ax);
                let mut out = vec![R::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..lane {
                        for t in 0..inner {
                            out[o * inner + t] += node.data[(o * lane + j) * inner + t];
                        }
                    }
                }
                for v in &mut out {
                    *v *= inv;
                }
                out
            }
        };
        let rg = self.needs(&[a]);
        self.push("mean", out_shape, data, rg, Op::Mean { a, axis })
    }

    /// Maximum along an axis (or of the whole tensor). The subgradient goes
    /// to the first maximum in iteration order.
    pub fn max(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let out_shape = self.reduce_shape("max", a, axis)?;
        let node = &self.nodes[a.0];
        let (data, argmax) = match axis {
            None => {
                let mut best = node.data[0];
                let mut at = 0usize;
                for (i, &v) in node.data.iter().enumerate() {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                (vec![best], vec![at])
            }
            Some(ax) => {
                let (outer, lane, inner) = lane_split(&node.shape, ax);
                let mut out = vec![R::zero(); outer * inner];
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for t in 0..inner {
                        let mut best = node.data[(o * lane) * inner + t];
                        let mut at = (o * lane) * inner + t;
                        for j in 1..lane {
                            let src = (o * lane + j) * inner + t;
                            if node.data[src] > best {
                                best = node.data[src];
                                at = src;
                            }
                        }
                        out[o * inner + t] = best;
                        arg[o * inner + t] = at;
                    }
                }
                (out, arg)
            }
        };
        let rg = self.needs(&[a]);
        self.push("max", out_shape, data, rg, Op::Max { a, argmax })
    }

    // ── structured ops ──────────────────────────────────────────────────

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let node = self.node("softmax", a)?;
        if axis >= node.shape.len() {
            return Err(Error::IndexOutOfRange { op: "softmax", index: axis, bound: node.shape.len() });
        }
        let shape = node.shape.clone();
        let (outer, lane, inner) = lane_split(&shape, axis);
        let x = &self.nodes[a.0].data;
        let mut data = vec![R::zero(); x.len()];
        if inner == 1 {
            kernels::softmax_rows(x, &mut data, lane);
        } else {
            let mut buf = vec![R::zero(); lane];
            for o in 0..outer {
                for t in 0..inner {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = x[(o * lane + j) * inner + t];
                    }
                    let mut tmp = vec![R::zero(); lane];
                    kernels::softmax_rows(&buf, &mut tmp, lane);
                    for (j, &v) in tmp.iter().enumerate() {
                        data[(o * lane + j) * inner + t] = v;
                    }
                }
            }
        }
        let rg = self.needs(&[a]);
        self.push("softmax", shape, data, rg, Op::Softmax { a, axis })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// Each row is shifted to mean 0 and scaled to unit variance
    /// (epsilon 1e-5) before gain and bias apply.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        self.node("layer_norm", x)?;
        self.node("layer_norm", gain)?;
        self.node("layer_norm", bias)?;
        let sx = self.nodes[x.0].shape.clone();
        let d = *sx.last().ok_or(Error::BadShape {
            op: "layer_norm",
            shape: sx.clone(),
            detail: "rank must be at least 1".into(),
        })?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.nodes[id.0].shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: sx.clone(),
                    rhs: self.nodes[id.0].shape.clone(),
                });
            }
        }
        let eps = R::from_f64(1e-5);
        let rows = numel(&sx) / d;
        let xv = &self.nodes[x.0].data;
        let gv = &self.nodes[gain.0].data;
        let bv = &self.nodes[bias.0].data;
        let mut data = vec![R::zero(); xv.len()];
        let mut means = vec![R::zero(); rows];
        let mut rstds = vec![R::zero(); rows];
        let inv_d = R::one() / R::from_usize(d);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rstd = R::one() / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        self.push("layer_norm", sx, data, rg, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds })
    }

    /// Look up embedding rows: `table` is `[vocab, d]`, `ids` has
    /// `batch * seq` entries, output is `[batch, seq, d]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[u32], batch: usize, seq: usize) -> Result<TensorId> {
        let node = self.node("embedding", table)?;
        if node.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "embedding",
                shape: node.shape.clone(),
                detail: "table must be rank 2".into(),
            });
        }
        let (vocab, d) = (node.shape[0], node.shape[1]);
        if ids.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Contract {
                op: "embedding",
                detail: format!("expected {batch}x{seq} ids, got {}", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::IndexOutOfRange { op: "embedding", index: bad as usize, bound: vocab });
        }
        let tv = &self.nodes[table.0].data;
        let mut data = vec![R::zero(); batch * seq * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.needs(&[table]);
        self.push("embedding", vec![batch, seq, d], data, rg, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// First `rows` rows of a rank-2 tensor.
    pub fn first_rows(&mut self, a: TensorId, rows: usize) -> Result<TensorId> {
        let node = self.node("first_rows", a)?;
        if node.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "first_rows",
                shape: node.shape.clone(),
                detail: "rank must be 2".into(),
            });
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        if rows == 0 || rows > r {
            return Err(Error::IndexOutOfRange { op: "first_rows", index: rows, bound: r });
        }
        let data = self.nodes[a.0].data[..rows * c].to_vec();
        let rg = self.needs(&[a]);
        self.push("first_rows", vec![rows, c], data, rg, Op::FirstRows { a })
    }

    /// Hidden vector at the final sequence position: `[b, s, d] -> [b, d]`.
    pub fn last_position(&mut self, a: TensorId) -> Result<TensorId> {
        let node = self.node("last_position", a)?;
        if node.shape.len() != 3 {
            return Err(Error::BadShape {
                op: "last_position",
                shape: node.shape.clone(),
                detail: "rank must be 3 (batch, seq, d)".into(),
            });
        }
        let (b, s, d) = (node.shape[0], node.shape[1], node.shape[2]);
        let xv = &self.nodes[a.0].data;
        let mut data = vec![R::zero(); b * d];
        for e in 0..b {
            let src = (e * s + (s - 1)) * d;
            data[e * d..(e + 1) * d].copy_from_slice(&xv[src..src + d]);
        }
        let rg = self.needs(&[a]);
        self.push("last_position", vec![b, d], data, rg, Op::LastPosition { a })
    }

    /// Column `col` of a rank-2 tensor as a vector.
    pub fn slice_column(&mut self, a: TensorId, col: usize) -> Result<TensorId> {
        let node = self.node("slice_column", a)?;
        if node.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "slice_column",
                shape: node.shape.clone(),
                detail: "rank must be 2".into(),
            });
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        if col >= c {
            return Err(Error::IndexOutOfRange { op: "slice_column", index: col, bound: c });
        }
        let xv = &self.nodes[a.0].data;
        let data: Vec<R> = (0..r).map(|i| xv[i * c + col]).collect();
        let rg = self.needs(&[a]);
        self.push("slice_column", vec![r], data, rg, Op::SliceColumn { a, col })
    }

    /// Row `row` of a rank-2 tensor as a vector.
    pub fn slice_row(&mut self, a: TensorId, row: usize) -> Result<TensorId> {
        let node = self.node("slice_row", a)?;
        if node.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "slice_row",
                shape: node.shape.clone(),
                detail: "rank must be 2".into(),
            });
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        if row >= r {
            return Err(Error::IndexOutOfRange { op: "slice_row", index: row, bound: r });
        }
        let data = self.nodes[a.0].data[row * c..(row + 1) * c].to_vec();
        let rg = self.needs(&[a]);
        self.push("slice_row", vec![c], data, rg, Op::SliceRow { a, row })
    }

    /// Scale each example's block of `x` by its entry in `w`:
    /// `x` is `[b, ...]`, `w` is `[b]`.
    pub fn gate(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (shape, per) = self.per_example_dims("gate", x, w)?;
        let xv = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let data: Vec<R> = xv.iter().enumerate().map(|(i, &v)| v * wv[i / per]).collect();
        let rg = self.needs(&[x, w]);
        self.push("gate", shape, data, rg, Op::Gate { x, w })
    }

    /// Divide each example's block of `x` by `max(1, w)`. This is the
    /// contributor normalization: slots receiving total connection weight
    /// above one are scaled back, slots at or below one pass unchanged.
    pub fn norm_by_weight(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (shape, per) = self.per_example_dims("norm_by_weight", x, w)?;
        let xv = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let one = R::one();
        let data: Vec<R> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = wv[i / per];
                if d > one { v / d } else { v }
            })
            .collect();
        let rg = self.needs(&[x, w]);
        self.push("norm_by_weight", shape, data, rg, Op::NormByWeight { x, w })
    }

    fn per_example_dims(&self, name: &'static str, x: TensorId, w: TensorId) -> Result<(Vec<usize>, usize)> {
        self.node(name, x)?;
        self.node(name, w)?;
        let sx = &self.nodes[x.0].shape;
        let sw = &self.nodes[w.0].shape;
        if sx.is_empty() || sw.len() != 1 || sw[0] != sx[0] {
            return Err(Error::ShapeMismatch { op: name, lhs: sx.clone(), rhs: sw.clone() });
        }
        Ok((sx.clone(), numel(sx) / sx[0]))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let node = self.node("reshape", a)?;
        check_shape("reshape", &shape)?;
        if numel(&shape) != node.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape,
            });
        }
        let data = node.data.clone();
        let rg = self.needs(&[a]);
        self.push("reshape", shape, data, rg, Op::Reshape { a })
    }

    pub fn swap_axes(&mut self, a: TensorId, ax0: usize, ax1: usize) -> Result<TensorId> {
        let node = self.node("swap_axes", a)?;
        let rank = node.shape.len();
        for ax in [ax0, ax1] {
            if ax >= rank {
                return Err(Error::IndexOutOfRange { op: "swap_axes", index: ax, bound: rank });
            }
        }
        let (data, shape) = kernels::swap_axes_copy(&self.nodes[a.0].data, &self.nodes[a.0].shape, ax0, ax1);
        let rg = self.needs(&[a]);
        self.push("swap_axes", shape, data, rg, Op::SwapAxes { a, ax0, ax1 })
    }

    /// Keep the `k` largest entries of each row of `[rows, cols]`, zero the
    /// rest. Kept values are copied unchanged; ties break toward the lowest
    /// column index.
    pub fn sparsify_topk(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        let node = self.node("sparsify_topk", a)?;
        if node.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "sparsify_topk",
                shape: node.shape.clone(),
                detail: "rank must be 2".into(),
            });
        }
        let (rows, cols) = (node.shape[0], node.shape[1]);
        if k == 0 || k > cols {
            return Err(Error::Contract {
                op: "sparsify_topk",
                detail: format!("k={k} outside 1..={cols}"),
            });
        }
        let xv = &self.nodes[a.0].data;
        let mut data = vec![R::zero(); xv.len()];
        let mut kept = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            for &j in &kernels::topk_indices(row, k) {
                data[r * cols + j] = row[j];
                kept.push(r * cols + j);
            }
        }
        let rg = self.needs(&[a]);
        self.push("sparsify_topk", vec![rows, cols], data, rg, Op::SparsifyTopK { a, kept })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, k]`), computed through a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let node = self.node("cross_entropy", logits)?;
        if node.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape: node.shape.clone(),
                detail: "logits must be rank 2".into(),
            });
        }
        let (n, k) = (node.shape[0], node.shape[1]);
        if targets.len() != n {
            return Err(Error::Contract {
                op: "cross_entropy",
                detail: format!("expected {n} targets, got {}", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(Error::IndexOutOfRange { op: "cross_entropy", index: bad as usize, bound: k });
        }
        let xv = &self.nodes[logits.0].data;
        let mut total = R::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv[r * k..(r + 1) * k];
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let sum: R = row.iter().map(|&v| (v - m).exp()).sum();
            total += m + sum.ln() - row[t as usize];
        }
        let loss = total / R::from_usize(n);
        let rg = self.needs(&[logits]);
        self.push("cross_entropy", Vec::new(), vec![loss], rg, Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grads`]; interior nodes hold the
    /// gradient of the most recent call.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let node = self.node("backward", loss)?;
        if node.data.len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", node.shape),
            });
        }
        let len = self.nodes.len();
        let mut ws: Vec<Option<Vec<R>>> = vec![None; len];
        ws[loss.0] = Some(vec![R::one()]);

        for i in (0..len).rev() {
            if !self.nodes[i].requires_grad {
                ws[i] = None;
                continue;
            }
            let Some(gy) = ws[i].take() else { continue };
            self.propagate(i, &gy, &mut ws);
            ws[i] = Some(gy);
        }

        for (i, slot) in ws.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => self.nodes[i].grad = Some(g),
                }
            } else {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    /// Lazily materialize the workspace gradient buffer of a parent node.
    /// Returns `None` when the parent does not participate in
    /// differentiation, so no gradient memory is spent on it.
    fn grad_slot<'w>(&self, ws: &'w mut [Option<Vec<R>>], id: TensorId) -> Option<&'w mut Vec<R>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let slot = &mut ws[id.0];
        if slot.is_none() {
            *slot = Some(vec![R::zero(); self.nodes[id.0].data.len()]);
        }
        slot.as_mut()
    }

    /// Apply the backward rule of node `i`, accumulating into `ws` slots of
    /// its parents. Parents always precede `i` on the tape.
    fn propagate(&self, i: usize, gy: &[R], ws: &mut [Option<Vec<R>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add { a, b, side } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    accumulate_broadcast(ga, gy, matches!(side, BroadcastSide::Lhs), false);
                }
                if let Some(gb) = self.grad_slot(ws, *b) {
                    accumulate_broadcast(gb, gy, matches!(side, BroadcastSide::Rhs), false);
                }
            }
            Op::Sub { a, b, side } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    accumulate_broadcast(ga, gy, matches!(side, BroadcastSide::Lhs), false);
                }
                if let Some(gb) = self.grad_slot(ws, *b) {
                    accumulate_broadcast(gb, gy, matches!(side, BroadcastSide::Rhs), true);
                }
            }
            Op::Mul { a, b, side } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let bv = &self.nodes[b.0].data;
                    let alen = self.nodes[a.0].data.len();
                    mul_backward_into(ga, gy, bv, alen, *side, true);
                }
                if let Some(gb) = self.grad_slot(ws, *b) {
                    let av = &self.nodes[a.0].data;
                    let blen = self.nodes[b.0].data.len();
                    mul_backward_into(gb, gy, av, blen, *side, false);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (g, &v) in ga.iter_mut().zip(gy) {
                        *g += v * *factor;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batches = numel(&sa[..sa.len() - 2]);
                let shared_b = sb.len() == 2;
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let bv = &self.nodes[b.0].data;
                    for t in 0..batches {
                        let g_t = &gy[t * m * n..(t + 1) * m * n];
                        let b_t = if shared_b { bv.as_slice() } else { &bv[t * k * n..(t + 1) * k * n] };
                        kernels::mm_nt(g_t, b_t, &mut ga[t * m * k..(t + 1) * m * k], m, n, k);
                    }
                }
                if let Some(gb) = self.grad_slot(ws, *b) {
                    let av = &self.nodes[a.0].data;
                    for t in 0..batches {
                        let g_t = &gy[t * m * n..(t + 1) * m * n];
                        let a_t = &av[t * m * k..(t + 1) * m * k];
                        let gb_t = if shared_b { &mut gb[..] } else { &mut gb[t * k * n..(t + 1) * k * n] };
                        kernels::mm_tn(a_t, g_t, gb_t, m, k, n);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let y = &self.nodes[i].data;
                    for ((g, &v), &yv) in ga.iter_mut().zip(gy).zip(y) {
                        *g += v * yv * (R::one() - yv);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let y = &self.nodes[i].data;
                    for ((g, &v), &yv) in ga.iter_mut().zip(gy).zip(y) {
                        *g += v * (R::one() - yv * yv);
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let x = &self.nodes[a.0].data;
                    for ((g, &v), &xv) in ga.iter_mut().zip(gy).zip(x) {
                        if xv > R::zero() {
                            *g += v;
                        }
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let y = &self.nodes[i].data;
                    for ((g, &v), &yv) in ga.iter_mut().zip(gy).zip(y) {
                        *g += v * yv;
                    }
                }
            }
            Op::Log { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let x = &self.nodes[a.0].data;
                    for ((g, &v), &xv) in ga.iter_mut().zip(gy).zip(x) {
                        *g += v / xv;
                    }
                }
            }
            Op::Sum { a, axis } => {
                let sa = self.nodes[a.0].shape.clone();
                if let Some(ga) = self.grad_slot(ws, *a) {
                    match axis {
                        None => {
                            for g in ga.iter_mut() {
                                *g += gy[0];
                            }
                        }
                        Some(ax) => {
                            let (outer, lane, inner) = lane_split(&sa, *ax);
                            for o in 0..outer {
                                for j in 0..lane {
                                    for t in 0..inner {
                                        ga[(o * lane + j) * inner + t] += gy[o * inner + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Mean { a, axis } => {
                let sa = self.nodes[a.0].shape.clone();
                if let Some(ga) = self.grad_slot(ws, *a) {
                    match axis {
                        None => {
                            let inv = R::one() / R::from_usize(ga.len());
                            for g in ga.iter_mut() {
                                *g += gy[0] * inv;
                            }
                        }
                        Some(ax) => {
                            let (outer, lane, inner) = lane_split(&sa, *ax);
                            let inv = R::one() / R::from_usize(lane);
                            for o in 0..outer {
                                for j in 0..lane {
                                    for t in 0..inner {
                                        ga[(o * lane + j) * inner + t] += gy[o * inner + t] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Max { a, argmax } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (oi, &src) in argmax.iter().enumerate() {
                        ga[src] += gy[oi];
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, lane, inner) = lane_split(&self.nodes[i].shape, *axis);
                if let Some(ga) = self.grad_slot(ws, *a) {
                    let y = &self.nodes[i].data;
                    for o in 0..outer {
                        for t in 0..inner {
                            let mut dot = R::zero();
                            for j in 0..lane {
                                let idx = (o * lane + j) * inner + t;
                                dot += gy[idx] * y[idx];
                            }
                            for j in 0..lane {
                                let idx = (o * lane + j) * inner + t;
                                ga[idx] += y[idx] * (gy[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let d = self.nodes[gain.0].data.len();
                let rows = self.nodes[x.0].data.len() / d;
                let inv_d = R::one() / R::from_usize(d);
                if let Some(gg) = self.grad_slot(ws, *gain) {
                    let xv = &self.nodes[x.0].data;
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            gg[j] += gy[r * d + j] * xhat;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(ws, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += gy[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(ws, *x) {
                    let xv = &self.nodes[x.0].data;
                    let gv = &self.nodes[gain.0].data;
                    for r in 0..rows {
                        let mut sum_dxhat = R::zero();
                        let mut sum_dxhat_xhat = R::zero();
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = gy[r * d + j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat * inv_d;
                        let m2 = sum_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = gy[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                if let Some(gt) = self.grad_slot(ws, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (g, &v) in dst.iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                            *g += v;
                        }
                    }
                }
            }
            Op::FirstRows { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (g, &v) in ga.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
            }
            Op::LastPosition { a } => {
                let sa = self.nodes[a.0].shape.clone();
                let (b, s, d) = (sa[0], sa[1], sa[2]);
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for e in 0..b {
                        let dst = (e * s + (s - 1)) * d;
                        for j in 0..d {
                            ga[dst + j] += gy[e * d + j];
                        }
                    }
                }
            }
            Op::SliceColumn { a, col } => {
                let c = self.nodes[a.0].shape[1];
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (i_row, &v) in gy.iter().enumerate() {
                        ga[i_row * c + col] += v;
                    }
                }
            }
            Op::SliceRow { a, row } => {
                let c = self.nodes[a.0].shape[1];
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (j, &v) in gy.iter().enumerate() {
                        ga[row * c + j] += v;
                    }
                }
            }
            Op::Gate { x, w } => {
                let per = self.nodes[x.0].data.len() / self.nodes[w.0].data.len();
                if let Some(gx) = self.grad_slot(ws, *x) {
                    let wv = &self.nodes[w.0].data;
                    for (idx, g) in gx.iter_mut().enumerate() {
                        *g += gy[idx] * wv[idx / per];
                    }
                }
                if let Some(gw) = self.grad_slot(ws, *w) {
                    let xv = &self.nodes[x.0].data;
                    for (idx, &v) in gy.iter().enumerate() {
                        gw[idx / per] += v * xv[idx];
                    }
                }
            }
            Op::NormByWeight { x, w } => {
                let per = self.nodes[x.0].data.len() / self.nodes[w.0].data.len();
                let one = R::one();
                if let Some(gx) = self.grad_slot(ws, *x) {
                    let wv = &self.nodes[w.0].data;
                    for (idx, g) in gx.iter_mut().enumerate() {
                        let d = wv[idx / per];
                        *g += if d > one { gy[idx] / d } else { gy[idx] };
                    }
                }
                if let Some(gw) = self.grad_slot(ws, *w) {
                    let (xv, wv) = (&self.nodes[x.0].data, &self.nodes[w.0].data);
                    for (idx, &v) in gy.iter().enumerate() {
                        let e = idx / per;
                        let d = wv[e];
                        // Below the clamp the denominator is constant 1, so
                        // the weight receives no gradient there.
                        if d > one {
                            gw[e] -= v * xv[idx] / (d * d);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (g, &v) in ga.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
            }
            Op::SwapAxes { a, ax0, ax1 } => {
                let (back, _) = kernels::swap_axes_copy(gy, &self.nodes[i].shape, *ax0, *ax1);
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for (g, &v) in ga.iter_mut().zip(&back) {
                        *g += v;
                    }
                }
            }
            Op::SparsifyTopK { a, kept } => {
                if let Some(ga) = self.grad_slot(ws, *a) {
                    for &idx in kept {
                        ga[idx] += gy[idx];
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (n, k) = {
                    let s = &self.nodes[logits.0].shape;
                    (s[0], s[1])
                };
                let inv_n = R::one() / R::from_usize(n);
                if let Some(gl) = self.grad_slot(ws, *logits) {
                    let xv = &self.nodes[logits.0].data;
                    let mut probs = vec![R::zero(); k];
                    for (r, &t) in targets.iter().enumerate() {
                        kernels::softmax_rows(&xv[r * k..(r + 1) * k], &mut probs, k);
                        for j in 0..k {
                            let indicator = if j == t as usize { R::one() } else { R::zero() };
                            gl[r * k + j] += (probs[j] - indicator) * gy[0] * inv_n;
                        }
                    }
                }
            }
        }
    }
}

/// dSmaller accumulation for broadcasted elementwise ops: when the target
/// was the tiled operand, gradient entries fold back modulo its length.
fn accumulate_broadcast<R: Real>(target: &mut [R], gy: &[R], tiled: bool, negate: bool) {
    if tiled {
        let n = target.len();
        for (idx, &v) in gy.iter().enumerate() {
            if negate {
                target[idx % n] -= v;
            } else {
                target[idx % n] += v;
            }
        }
    } else {
        for (g, &v) in target.iter_mut().zip(gy) {
            if negate {
                *g -= v;
            } else {
                *g += v;
            }
        }
    }
}

/// Backward for `mul`: `target` receives `gy * other`, where either side
/// may be the tiled operand.
fn mul_backward_into<R: Real>(
    target: &mut [R],
    gy: &[R],
    other: &[R],
    target_len: usize,
    side: BroadcastSide,
    target_is_lhs: bool,
) {
    let target_tiled = match side {
        BroadcastSide::None => false,
        BroadcastSide::Lhs => target_is_lhs,
        BroadcastSide::Rhs => !target_is_lhs,
    };
    let on = other.len();
    if target_tiled {
        for (idx, &v) in gy.iter().enumerate() {
            target[idx % target_len] += v * other[idx % on];
        }
    } else {
        for (idx, &v) in gy.iter().enumerate() {
            target[idx] += v * other[idx % on];
        }
    }
}
