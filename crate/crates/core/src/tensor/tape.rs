use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::{Tensor, TensorError};

/// Lower clamp applied by [`Var::log_guarded`].
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs shape equals lhs shape without its leading extent
    Leading,
    /// rhs holds a single value
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self, TensorError> {
        if lhs == rhs {
            Ok(Self::Same)
        } else if rhs.iter().product::<usize>() == 1 && rhs.len() <= 1 {
            Ok(Self::Scalar)
        } else if lhs.len() == rhs.len() + 1 && &lhs[1..] == rhs {
            Ok(Self::Leading)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            })
        }
    }

    #[inline]
    fn rhs_index(self, i: usize, rhs_len: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Leading => i % rhs_len,
            Self::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Div(usize, usize, Broadcast),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    LogGuarded(usize),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize, Vec<usize>),
    Mean(usize, Vec<usize>),
    SegmentMean(usize, Vec<usize>),
    StopGradient,
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    LogSoftmax(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LogGuarded(_) => "log_guarded",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SegmentMean(..) => "segment_mean",
            Op::StopGradient => "stop_gradient",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param_key: Option<usize>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<usize, usize>,
    generation: u64,
    /// First operation that produced a non-finite value (debug builds).
    poisoned: Option<&'static str>,
}

/// Records operations for one forward/backward cycle.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. [`Var::backward`] walks it once in reverse and
/// then clears it; any [`Var`] from the cleared cycle becomes unusable.
///
/// Debug builds check every op output for NaN/Inf; the first offender is
/// reported by [`Tape::check_finite`] and fails the next backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
    by_param: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }

    /// Gradient of the parameter registered under `key`.
    pub fn param(&self, key: usize) -> Option<&Tensor> {
        self.by_param.get(&key)
    }

    pub fn param_keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_param.keys().copied()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable input identified by `key`. Repeated calls with the same key
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&self, key: usize, value: &Tensor) -> Var<'_> {
        if let Some(&id) = self.inner.borrow().params.get(&key) {
            return self.var(id);
        }
        let var = self.push(value.clone(), Op::Leaf, true);
        let mut inner = self.inner.borrow_mut();
        inner.nodes[var.id].param_key = Some(key);
        inner.params.insert(key, var.id);
        var
    }

    /// Errors if any recorded op produced a non-finite value (debug builds).
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.inner.borrow().poisoned {
            Some(op) => Err(TensorError::NonFiniteOp { op }),
            None => Ok(()),
        }
    }

    /// Drops every recorded node.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.params.clear();
        inner.poisoned = None;
        inner.generation += 1;
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var {
            tape: self,
            id,
            generation: self.inner.borrow().generation,
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        if cfg!(debug_assertions) && inner.poisoned.is_none() && !value.is_finite() {
            inner.poisoned = Some(op.name());
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
            param_key: None,
        });
        Var {
            tape: self,
            id,
            generation: inner.generation,
        }
    }
}

fn reduction_plan(
    op: &'static str,
    shape: &[usize],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<usize>), TensorError> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&axis) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let out_shape = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect();
    Ok((axes, out_shape))
}

/// For every flat input index, the flat output index it reduces into.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            out_strides[d] = stride;
            stride *= shape[d];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    let mut out = 0usize;
    for _ in 0..n {
        map.push(out);
        for d in (0..rank).rev() {
            coord[d] += 1;
            out += out_strides[d];
            if coord[d] < shape[d] {
                break;
            }
            out -= out_strides[d] * shape[d];
            coord[d] = 0;
        }
    }
    map
}

fn rank_check(op: &'static str, t: &Tensor, rank: usize) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn stride_check(stride: usize) -> Result<(), TensorError> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(TensorError::Invalid(format!(
            "stride must be 1 or 2, got {stride}"
        )))
    }
}

// Arithmetic is fallible (shape checks), so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn with_node<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        let inner = self.tape.inner.borrow();
        assert_eq!(
            inner.generation, self.generation,
            "variable used after its tape was cleared"
        );
        f(&inner.nodes[self.id])
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.with_node(|n| n.value.clone())
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        self.with_node(|n| f(&n.value))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_node(|n| n.value.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_node(|n| n.value.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.with_node(|n| n.requires_grad)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = self.with_node(|n| {
            let data = n.value.data().iter().map(|&x| f(x)).collect();
            (
                Tensor::from_parts(n.value.shape().to_vec(), data),
                n.requires_grad,
            )
        });
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        make: fn(usize, usize, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let (value, rg, mode) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            let mode = Broadcast::resolve(name, a.value.shape(), b.value.shape())?;
            let bd = b.value.data();
            let data = a
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[mode.rhs_index(i, bd.len())]))
                .collect();
            (
                Tensor::from_parts(a.value.shape().to_vec(), data),
                a.requires_grad || b.requires_grad,
                mode,
            )
        };
        Ok(self.tape.push(value, make(self.id, rhs.id, mode), rg))
    }

    /// Elementwise sum; `rhs` may also broadcast over the leading extent or be a scalar.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    /// Elementwise quotient. Errors if any divisor is zero.
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        if rhs.with_value(|t| t.data().contains(&0.0)) {
            return Err(TensorError::Domain {
                op: "div",
                value: 0.0,
            });
        }
        self.binary(rhs, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(self) -> Result<Var<'t>, TensorError> {
        if let Some(bad) = self.with_value(|t| t.data().iter().copied().find(|&x| x <= 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// `log(max(x, LOG_GUARD))`, for likelihood terms only.
    pub fn log_guarded(self) -> Var<'t> {
        self.unary(Op::LogGuarded(self.id), |x| x.max(LOG_GUARD).ln())
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Forward identity that blocks gradient flow into `self`.
    pub fn stop_gradient(self) -> Var<'t> {
        let value = self.value();
        self.tape.push(value, Op::StopGradient, false)
    }

    fn reduce(self, axes: &[usize], mean: bool) -> Result<Var<'t>, TensorError> {
        let name = if mean { "mean" } else { "sum" };
        let (value, rg, axes) = self.with_node(|n| {
            let shape = n.value.shape();
            let (axes, out_shape) = reduction_plan(name, shape, axes)?;
            let map = reduction_map(shape, &axes);
            let mut out = vec![0.0; out_shape.iter().product()];
            for (&o, &x) in map.iter().zip(n.value.data()) {
                out[o] += x;
            }
            if mean {
                let count = (n.value.numel() / out.len()) as f64;
                out.iter_mut().for_each(|v| *v /= count);
            }
            Ok::<_, TensorError>((Tensor::from_parts(out_shape, out), n.requires_grad, axes))
        })?;
        let op = if mean {
            Op::Mean(self.id, axes)
        } else {
            Op::Sum(self.id, axes)
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Sum over `axes` (removed from the shape). An empty list is the identity.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>, TensorError> {
        self.reduce(axes, false)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>, TensorError> {
        self.reduce(axes, true)
    }

    pub fn sum(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.with_node(|n| n.value.rank())).collect();
        self.reduce(&axes, false).expect("all axes are valid")
    }

    pub fn mean(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.with_node(|n| n.value.rank())).collect();
        self.reduce(&axes, true).expect("all axes are valid")
    }

    /// Row means over consecutive groups: rows `[0, s0)` form the first
    /// output row, the next `s1` rows the second, and so on.
    pub fn segment_mean(self, segments: &[usize]) -> Result<Var<'t>, TensorError> {
        let (value, rg) = self.with_node(|n| {
            rank_check("segment_mean", &n.value, 2)?;
            let (rows, cols) = (n.value.shape()[0], n.value.shape()[1]);
            if segments.is_empty()
                || segments.contains(&0)
                || segments.iter().sum::<usize>() != rows
            {
                return Err(TensorError::Invalid(format!(
                    "segment sizes {segments:?} do not partition {rows} rows"
                )));
            }
            let data = n.value.data();
            let mut out = vec![0.0; segments.len() * cols];
            let mut start = 0;
            for (s, &len) in segments.iter().enumerate() {
                let dst = &mut out[s * cols..(s + 1) * cols];
                for r in start..start + len {
                    for (d, &x) in dst.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                        *d += x;
                    }
                }
                dst.iter_mut().for_each(|d| *d /= len as f64);
                start += len;
            }
            Ok((
                Tensor::from_parts(vec![segments.len(), cols], out),
                n.requires_grad,
            ))
        })?;
        Ok(self
            .tape
            .push(value, Op::SegmentMean(self.id, segments.to_vec()), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let (value, rg) = self.with_node(|n| {
            let value = n.value.clone().reshape(shape.to_vec())?;
            Ok::<_, TensorError>((value, n.requires_grad))
        })?;
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Flattens every axis after the leading one.
    pub fn flatten(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(&[shape[0], rest])
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        parts.iter().for_each(|p| first.same_tape(p));
        let (value, rg) = {
            let inner = first.tape.inner.borrow();
            let nodes: Vec<&Node> = parts.iter().map(|p| &inner.nodes[p.id]).collect();
            for n in &nodes {
                rank_check("concat_cols", &n.value, 2)?;
            }
            let rows = nodes[0].value.shape()[0];
            if let Some(bad) = nodes.iter().find(|n| n.value.shape()[0] != rows) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: nodes[0].value.shape().to_vec(),
                    rhs: bad.value.shape().to_vec(),
                });
            }
            let total: usize = nodes.iter().map(|n| n.value.shape()[1]).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for n in &nodes {
                    let c = n.value.shape()[1];
                    out.extend_from_slice(&n.value.data()[r * c..(r + 1) * c]);
                }
            }
            (
                Tensor::from_parts(vec![rows, total], out),
                nodes.iter().any(|n| n.requires_grad),
            )
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(value, Op::ConcatCols(ids), rg))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        let (value, rg) = self.with_node(|n| {
            rank_check("slice_cols", &n.value, 2)?;
            let (rows, cols) = (n.value.shape()[0], n.value.shape()[1]);
            if start >= end || end > cols {
                return Err(TensorError::Invalid(format!(
                    "column range {start}..{end} invalid for {cols} columns"
                )));
            }
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&n.value.data()[r * cols + start..r * cols + end]);
            }
            Ok((
                Tensor::from_parts(vec![rows, end - start], out),
                n.requires_grad,
            ))
        })?;
        Ok(self.tape.push(value, Op::SliceCols(self.id, start), rg))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let (value, rg) = self.with_node(|n| {
            rank_check("log_softmax", &n.value, 2)?;
            let cols = n.value.shape()[1];
            let mut out = n.value.data().to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Ok((
                Tensor::from_parts(n.value.shape().to_vec(), out),
                n.requires_grad,
            ))
        })?;
        Ok(self.tape.push(value, Op::LogSoftmax(self.id), rg))
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let c = kernels::matmul(a.value.data(), b.value.data(), m, k, n);
            (
                Tensor::from_parts(vec![m, n], c),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, rhs.id), rg))
    }

    /// Cross-correlation of `[B×C×H×W]` with a `[F×C×k×k]` kernel (k odd),
    /// zero-padded by `(k-1)/2` on each side, plus an optional `[F]` bias.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&kernel);
        stride_check(stride)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let w = &inner.nodes[kernel.id];
            rank_check("conv2d", &x.value, 4)?;
            let (ks, xs) = (w.value.shape(), x.value.shape());
            check_kernel("conv2d", ks)?;
            if ks[1] != xs[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ks.to_vec(),
                });
            }
            let k = ks[2];
            let geom = ConvGeometry {
                batch: xs[0],
                wide_c: xs[1],
                wide_h: xs[2],
                wide_w: xs[3],
                narrow_c: ks[0],
                narrow_h: kernels::conv_output_size(xs[2], k, stride),
                narrow_w: kernels::conv_output_size(xs[3], k, stride),
                k,
                stride,
            };
            let mut out = vec![0.0; geom.batch * geom.narrow_c * geom.narrow_h * geom.narrow_w];
            kernels::conv_gather(x.value.data(), w.value.data(), geom, &mut out);
            let mut rg = x.requires_grad || w.requires_grad;
            if let Some(b) = bias {
                let b = &inner.nodes[b.id];
                add_channel_bias(
                    &mut out,
                    &b.value,
                    geom.narrow_c,
                    geom.narrow_h * geom.narrow_w,
                    "conv2d",
                )?;
                rg |= b.requires_grad;
            }
            (
                Tensor::from_parts(
                    vec![geom.batch, geom.narrow_c, geom.narrow_h, geom.narrow_w],
                    out,
                ),
                rg,
            )
        };
        let op = Op::Conv2d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            stride,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Adjoint of [`Var::conv2d`]: maps `[B×Cin×H×W]` to `[B×Cout×H'×W']`
    /// with a `[Cin×Cout×k×k]` kernel. The output extent defaults to
    /// `H·stride`; pass `output_hw` when the matching conv2d input was odd.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        output_hw: Option<(usize, usize)>,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&kernel);
        stride_check(stride)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let w = &inner.nodes[kernel.id];
            rank_check("conv_transpose2d", &x.value, 4)?;
            let (ks, xs) = (w.value.shape(), x.value.shape());
            check_kernel("conv_transpose2d", ks)?;
            if ks[0] != xs[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: xs.to_vec(),
                    rhs: ks.to_vec(),
                });
            }
            let k = ks[2];
            let (oh, ow) = output_hw.unwrap_or((xs[2] * stride, xs[3] * stride));
            if oh == 0
                || ow == 0
                || kernels::conv_output_size(oh, k, stride) != xs[2]
                || kernels::conv_output_size(ow, k, stride) != xs[3]
            {
                return Err(TensorError::Invalid(format!(
                    "conv_transpose2d: output {oh}x{ow} does not map back to input {}x{} at stride {stride}",
                    xs[2], xs[3]
                )));
            }
            let geom = ConvGeometry {
                batch: xs[0],
                wide_c: ks[1],
                wide_h: oh,
                wide_w: ow,
                narrow_c: xs[1],
                narrow_h: xs[2],
                narrow_w: xs[3],
                k,
                stride,
            };
            let mut out = vec![0.0; geom.batch * geom.wide_c * oh * ow];
            kernels::conv_scatter(x.value.data(), w.value.data(), geom, &mut out);
            let mut rg = x.requires_grad || w.requires_grad;
            if let Some(b) = bias {
                let b = &inner.nodes[b.id];
                add_channel_bias(&mut out, &b.value, geom.wide_c, oh * ow, "conv_transpose2d")?;
                rg |= b.requires_grad;
            }
            (
                Tensor::from_parts(vec![geom.batch, geom.wide_c, oh, ow], out),
                rg,
            )
        };
        let op = Op::ConvTranspose2d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            stride,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Reverse pass from a scalar. Every leaf that requires a gradient gets
    /// one (zeros when unreachable); the tape is cleared afterwards.
    pub fn backward(self) -> Result<Gradients, TensorError> {
        let shape = self.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let checked = self.tape.check_finite().and_then(|()| {
            if self.item().is_finite() {
                Ok(())
            } else {
                Err(TensorError::NonFiniteOp { op: "loss" })
            }
        });
        if let Err(e) = checked {
            self.tape.clear();
            return Err(e);
        }
        let grads = {
            let inner = self.tape.inner.borrow();
            backward_pass(&inner.nodes, self.id)
        };
        self.tape.clear();
        Ok(grads)
    }
}

fn check_kernel(op: &'static str, ks: &[usize]) -> Result<(), TensorError> {
    if ks.len() != 4 || ks[2] != ks[3] || ks[2].is_multiple_of(2) {
        return Err(TensorError::Invalid(format!(
            "{op}: kernel must be [out, in, k, k] with odd k, got {ks:?}"
        )));
    }
    Ok(())
}

fn add_channel_bias(
    out: &mut [f64],
    bias: &Tensor,
    channels: usize,
    plane: usize,
    op: &'static str,
) -> Result<(), TensorError> {
    if bias.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![channels],
            rhs: bias.shape().to_vec(),
        });
    }
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.data()[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    output: &[usize],
    stride: usize,
    transpose: bool,
) -> ConvGeometry {
    let (wide, narrow) = if transpose {
        (output, input)
    } else {
        (input, output)
    };
    ConvGeometry {
        batch: input[0],
        wide_c: wide[1],
        wide_h: wide[2],
        wide_w: wide[3],
        narrow_c: narrow[1],
        narrow_h: narrow[2],
        narrow_w: narrow[3],
        k: kernel[2],
        stride,
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backward_pass(nodes: &[Node], root: usize) -> Gradients {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
    grads[root] = Some(vec![1.0]);

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.requires_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let out = &node.value;
        let rg = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| &nodes[i].value;

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            &Op::Add(a, b, mode) | &Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if rg(a) {
                    let s = slot(&mut grads, a, g.len());
                    s.iter_mut().zip(&g).for_each(|(s, &gv)| *s += gv);
                }
                if rg(b) {
                    let bl = val(b).numel();
                    let s = slot(&mut grads, b, bl);
                    for (i, &gv) in g.iter().enumerate() {
                        s[mode.rhs_index(i, bl)] += sign * gv;
                    }
                }
            }
            &Op::Mul(a, b, mode) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                let bl = bd.len();
                if rg(a) {
                    let s = slot(&mut grads, a, g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        s[i] += gv * bd[mode.rhs_index(i, bl)];
                    }
                }
                if rg(b) {
                    let s = slot(&mut grads, b, bl);
                    for (i, &gv) in g.iter().enumerate() {
                        s[mode.rhs_index(i, bl)] += gv * ad[i];
                    }
                }
            }
            &Op::Div(a, b, mode) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                let bl = bd.len();
                if rg(a) {
                    let s = slot(&mut grads, a, g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        s[i] += gv / bd[mode.rhs_index(i, bl)];
                    }
                }
                if rg(b) {
                    let s = slot(&mut grads, b, bl);
                    for (i, &gv) in g.iter().enumerate() {
                        let j = mode.rhs_index(i, bl);
                        s[j] -= gv * ad[i] / (bd[j] * bd[j]);
                    }
                }
            }
            &Op::Neg(a) => {
                let s = slot(&mut grads, a, g.len());
                s.iter_mut().zip(&g).for_each(|(s, &gv)| *s -= gv);
            }
            &Op::Scale(a, c) => {
                let s = slot(&mut grads, a, g.len());
                s.iter_mut().zip(&g).for_each(|(s, &gv)| *s += c * gv);
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                let s = slot(&mut grads, a, g.len());
                s.iter_mut().zip(&g).for_each(|(s, &gv)| *s += gv);
            }
            &Op::Exp(a) => {
                let s = slot(&mut grads, a, g.len());
                for ((s, &gv), &y) in s.iter_mut().zip(&g).zip(out.data()) {
                    *s += gv * y;
                }
            }
            &Op::Log(a) => {
                let x = val(a).data();
                let s = slot(&mut grads, a, g.len());
                for ((s, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                    *s += gv / xv;
                }
            }
            &Op::LogGuarded(a) => {
                let x = val(a).data();
                let s = slot(&mut grads, a, g.len());
                for ((s, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                    if xv > LOG_GUARD {
                        *s += gv / xv;
                    }
                }
            }
            &Op::Relu(a) => {
                let x = val(a).data();
                let s = slot(&mut grads, a, g.len());
                for ((s, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                    if xv > 0.0 {
                        *s += gv;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let s = slot(&mut grads, a, g.len());
                for ((s, &gv), &y) in s.iter_mut().zip(&g).zip(out.data()) {
                    *s += gv * y * (1.0 - y);
                }
            }
            &Op::Square(a) => {
                let x = val(a).data();
                let s = slot(&mut grads, a, g.len());
                for ((s, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                    *s += 2.0 * xv * gv;
                }
            }
            Op::Sum(a, axes) | Op::Mean(a, axes) => {
                let a = *a;
                let input = val(a);
                let map = reduction_map(input.shape(), axes);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / (input.numel() / out.numel()) as f64
                } else {
                    1.0
                };
                let s = slot(&mut grads, a, input.numel());
                for (s, &o) in s.iter_mut().zip(&map) {
                    *s += scale * g[o];
                }
            }
            Op::SegmentMean(a, segments) => {
                let a = *a;
                let cols = out.shape()[1];
                let s = slot(&mut grads, a, val(a).numel());
                let mut start = 0;
                for (seg, &len) in segments.iter().enumerate() {
                    let gr = &g[seg * cols..(seg + 1) * cols];
                    for r in start..start + len {
                        for (sv, &gv) in s[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *sv += gv / len as f64;
                        }
                    }
                    start += len;
                }
            }
            Op::ConcatCols(ids) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in ids {
                    let c = val(p).shape()[1];
                    if rg(p) {
                        let s = slot(&mut grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                s[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            &Op::SliceCols(a, start) => {
                let (rows, width) = (out.shape()[0], out.shape()[1]);
                let cols = val(a).shape()[1];
                let s = slot(&mut grads, a, rows * cols);
                for r in 0..rows {
                    for j in 0..width {
                        s[r * cols + start + j] += g[r * width + j];
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let cols = out.shape()[1];
                let s = slot(&mut grads, a, g.len());
                for ((sr, gr), yr) in s
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: f64 = gr.iter().sum();
                    for ((sv, &gv), &y) in sr.iter_mut().zip(gr).zip(yr) {
                        *sv += gv - y.exp() * total;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if rg(a) {
                    let s = slot(&mut grads, a, m * k);
                    kernels::matmul_grad_lhs(&g, bv.data(), m, k, n, s);
                }
                if rg(b) {
                    let s = slot(&mut grads, b, k * n);
                    kernels::matmul_grad_rhs(av.data(), &g, m, k, n, s);
                }
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (xv, wv) = (val(input), val(kernel));
                let geom = conv_geometry(xv.shape(), wv.shape(), out.shape(), stride, false);
                if rg(input) {
                    let s = slot(&mut grads, input, xv.numel());
                    kernels::conv_scatter(&g, wv.data(), geom, s);
                }
                if rg(kernel) {
                    let s = slot(&mut grads, kernel, wv.numel());
                    kernels::conv_kernel_grad(xv.data(), &g, geom, s);
                }
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    bias_grad(
                        &mut grads,
                        b,
                        &g,
                        geom.narrow_c,
                        geom.narrow_h * geom.narrow_w,
                    );
                }
            }
            &Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (xv, wv) = (val(input), val(kernel));
                let geom = conv_geometry(xv.shape(), wv.shape(), out.shape(), stride, true);
                if rg(input) {
                    let s = slot(&mut grads, input, xv.numel());
                    kernels::conv_gather(&g, wv.data(), geom, s);
                }
                if rg(kernel) {
                    let s = slot(&mut grads, kernel, wv.numel());
                    kernels::conv_kernel_grad(&g, xv.data(), geom, s);
                }
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    bias_grad(&mut grads, b, &g, geom.wide_c, geom.wide_h * geom.wide_w);
                }
            }
        }
    }

    let mut result = Gradients::default();
    for (id, node) in nodes.iter().enumerate().take(root + 1) {
        if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
            continue;
        }
        let data = grads[id]
            .take()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        let tensor = Tensor::from_parts(node.value.shape().to_vec(), data);
        if let Some(key) = node.param_key {
            result.by_param.insert(key, tensor.clone());
        }
        result.by_node.insert(id, tensor);
    }
    // parameters recorded after the loss still get (zero) gradients
    for node in nodes.iter().skip(root + 1) {
        if let (Some(key), true) = (node.param_key, node.requires_grad) {
            result
                .by_param
                .entry(key)
                .or_insert_with(|| Tensor::zeros(node.value.shape()));
        }
    }
    result
}

fn bias_grad(
    grads: &mut [Option<Vec<f64>>],
    bias: usize,
    g: &[f64],
    channels: usize,
    plane: usize,
) {
    let s = slot(grads, bias, channels);
    for (i, chunk) in g.chunks(plane).enumerate() {
        s[i % channels] += chunk.iter().sum::<f64>();
    }
}
