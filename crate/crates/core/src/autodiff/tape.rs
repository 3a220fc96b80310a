//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly, appends a node to the tape and keeps
//! its forward value for the backward pass. Node ids are handed out in
//! execution order, so the tape is topologically sorted by construction and
//! backward is a single reverse sweep.
//!
//! Broadcasting is limited to a one-element tensor combined with a tensor of
//! any shape. Row-wise broadcasting (bias, batch-norm scale) goes through the
//! dedicated [`Tape::add_row`] and [`Tape::mul_row`] ops.
//!
//! Any forward op whose output contains NaN or infinity returns
//! [`Error::NonFinite`] naming the op and the value ranges of its inputs.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added inside `log` and inside the `l2_normalize` square root.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, index: usize },
    Binary { kind: BinKind, a: NodeId, b: NodeId, bcast: Bcast },
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Sigmoid(NodeId),
    Powf(NodeId, f64),
    SmoothL1(NodeId, f64),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    MaxLast { x: NodeId, argmax: Vec<usize> },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExpLast { x: NodeId, mask: Option<Arc<Vec<bool>>> },
    L2Normalize { x: NodeId, norms: Vec<f64> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Detach,
    Gather { x: NodeId, index: Arc<Vec<Option<usize>>> },
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    BatchNorm { x: NodeId, inv_std: Vec<f64> },
    AvgPool { x: NodeId, w: usize, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Neg(_) => "negate",
            Op::Sigmoid(_) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MaxLast { .. } => "max_reduce",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExpLast { .. } => "logsumexp",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Detach => "detach",
            Op::Gather { .. } => "gather",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AvgPool { .. } => "avg_pool",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), NodeId>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(u64, usize, NodeId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`, if it required one and
    /// was reached.
    pub fn wrt(&self, node: NodeId) -> Option<Tensor> {
        self.grads[node.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[node.0].clone(), g.clone()))
    }

    /// Adds (+=) the gradient of every parameter of `store` bound on the tape
    /// into its `grad` buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(sid, idx, node) in &self.params {
            if sid != store.id() {
                continue;
            }
            if let Some(g) = &self.grads[node.0] {
                let p = store.by_index_mut(idx);
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// Gradient for a parameter by name, zero when it was not reached.
    pub fn param_grad(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let idx = store.index_of(name)?;
        let shape = store.by_index(idx).value.shape().to_vec();
        for &(sid, i, node) in &self.params {
            if sid == store.id() && i == idx {
                if let Some(g) = &self.grads[node.0] {
                    return Ok(Tensor::from_parts(shape, g.clone()));
                }
            }
        }
        Ok(Tensor::zeros(&shape))
    }
}

fn last_dim(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    (t.numel() / cols, cols)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and `c` (m x n, row-major), checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            let ranges = inputs
                .iter()
                .map(|i| {
                    let (lo, hi) = self.nodes[i.0].value.range();
                    format!("[{lo:e}, {hi:e}]")
                })
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::NonFinite {
                op: op.name(),
                ranges,
            });
        }
        let requires_grad =
            !matches!(op, Op::Detach) && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    /// Input tensor. With `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Binds a parameter onto the tape (once per tape; later calls reuse the
    /// node). Buffers and parameters of frozen stores bind as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store.index_of(name)?;
        Ok(self.param_at(store, idx))
    }

    pub fn param_at(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        let key = (store.id(), idx);
        if let Some(&id) = self.bound.get(&key) {
            return id;
        }
        let p = store.by_index(idx);
        let requires_grad = !store.is_frozen() && p.kind == ParamKind::Trainable;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param {
                store: store.id(),
                index: idx,
            },
            requires_grad,
        });
        self.bound.insert(key, id);
        id
    }

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bcast = if va.shape() == vb.shape() {
            Bcast::Same
        } else if va.is_scalar() {
            Bcast::LeftScalar
        } else if vb.is_scalar() {
            Bcast::RightScalar
        } else {
            return Err(Error::shape(
                "binary",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match bcast {
            Bcast::Same => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::LeftScalar => {
                let x = va.item();
                (vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())
            }
            Bcast::RightScalar => {
                let y = vb.item();
                (va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        self.push(
            Op::Binary { kind, a, b, bcast },
            Tensor::from_parts(shape, data),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Div, a, b)
    }

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect());
        self.push(op, out, &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map(x, Op::MulScalar(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// `ln(x + EPS)`.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Log(x), |v| (v + EPS).ln())
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Neg(x), |v| -v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    /// `x^p` elementwise; inputs must be non-negative unless `p` is integral.
    pub fn powf(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.map(x, Op::Powf(x, p), |v| v.powf(p))
    }

    /// Elementwise smooth-L1 (Huber with transition `beta`):
    /// `0.5 x^2 / beta` for `|x| < beta`, else `|x| - 0.5 beta`.
    pub fn smooth_l1(&mut self, x: NodeId, beta: f64) -> Result<NodeId> {
        if beta <= 0.0 {
            return Err(Error::invalid(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        self.map(x, Op::SmoothL1(x, beta), |v| {
            let a = v.abs();
            if a < beta {
                0.5 * v * v / beta
            } else {
                a - 0.5 * beta
            }
        })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ((m, k), (k2, n)) = match (va.dims2(), vb.dims2()) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", va.shape(), vb.shape()),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            m,
            k,
            n,
            (va.data(), k as isize, 1),
            (vb.data(), n as isize, 1),
            &mut out,
            0.0,
        );
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (r, c) = v
            .dims2()
            .ok_or_else(|| Error::shape("transpose", format!("{:?}", v.shape())))?;
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::from_parts(vec![c, r], out), &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    /// Sum along the last axis.
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = last_dim(v);
        let out: Vec<f64> = v.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = reduced_shape(v.shape());
        debug_assert_eq!(out.len(), rows);
        self.push(Op::SumLast(x), Tensor::from_parts(shape, out), &[x])
    }

    /// Maximum along the last axis; the gradient flows to the first argmax.
    pub fn max_last(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (_, cols) = last_dim(v);
        let mut argmax = Vec::new();
        let mut out = Vec::new();
        for row in v.data().chunks(cols) {
            let (i, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &e)| if e > bm { (i, e) } else { (bi, bm) });
            argmax.push(i);
            out.push(m);
        }
        let shape = reduced_shape(v.shape());
        self.push(Op::MaxLast { x, argmax }, Tensor::from_parts(shape, out), &[x])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (_, cols) = last_dim(v);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut s = 0.0;
            for &e in row {
                let ex = (e - m).exp();
                s += ex;
                out.push(ex);
            }
            out[start..].iter_mut().for_each(|e| *e /= s);
        }
        let shape = v.shape().to_vec();
        self.push(Op::Softmax(x), Tensor::from_parts(shape, out), &[x])
    }

    /// Log-softmax along the last axis (log-sum-exp stabilized).
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (_, cols) = last_dim(v);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let lse = logsumexp(row.iter().copied());
            out.extend(row.iter().map(|&e| e - lse));
        }
        let shape = v.shape().to_vec();
        self.push(Op::LogSoftmax(x), Tensor::from_parts(shape, out), &[x])
    }

    /// Log-sum-exp along the last axis over entries whose `mask` is true
    /// (all entries when `mask` is `None`). Every row needs at least one
    /// included entry.
    pub fn logsumexp_last(&mut self, x: NodeId, mask: Option<Arc<Vec<bool>>>) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (_, cols) = last_dim(v);
        if let Some(m) = &mask {
            if m.len() != v.numel() {
                return Err(Error::shape(
                    "logsumexp",
                    format!("mask of {} for tensor {:?}", m.len(), v.shape()),
                ));
            }
        }
        let mut out = Vec::new();
        for (r, row) in v.data().chunks(cols).enumerate() {
            let included = row
                .iter()
                .enumerate()
                .filter(|(c, _)| mask.as_ref().is_none_or(|m| m[r * cols + c]))
                .map(|(_, &e)| e);
            let lse = logsumexp(included);
            if lse == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("logsumexp row {r} has no included entries")));
            }
            out.push(lse);
        }
        let shape = reduced_shape(v.shape());
        self.push(Op::LogSumExpLast { x, mask }, Tensor::from_parts(shape, out), &[x])
    }

    /// Rows scaled to unit L2 norm: `x / sqrt(sum(x^2) + EPS)`.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (_, cols) = last_dim(v);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let n = (row.iter().map(|e| e * e).sum::<f64>() + EPS).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|e| e / n));
        }
        let shape = v.shape().to_vec();
        self.push(Op::L2Normalize { x, norms }, Tensor::from_parts(shape, out), &[x])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for id in inputs {
            let s = self.nodes[id.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let v = &self.nodes[id.0].value;
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, out),
            inputs,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, inner) = outer_inner(shape, axis);
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[o * full + start * inner..o * full + end * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = end - start;
        self.push(Op::Slice { x, axis, start }, Tensor::from_parts(new_shape, out), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(x), v, &[x])
    }

    /// Identity in the forward pass; blocks all gradient.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::Detach, v, &[x])
    }

    /// Flat gather: `out[i] = x[index[i]]`, or 0 where `index[i]` is `None`.
    pub fn gather(
        &mut self,
        x: NodeId,
        index: Arc<Vec<Option<usize>>>,
        shape: &[usize],
    ) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output {shape:?}", index.len()),
            ));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(numel);
        for i in index.iter() {
            match *i {
                Some(j) if j < d.len() => out.push(d[j]),
                Some(j) => {
                    return Err(Error::shape(
                        "gather",
                        format!("index {j} out of range for {:?}", v.shape()),
                    ))
                }
                None => out.push(0.0),
            }
        }
        self.push(Op::Gather { x, index }, Tensor::from_parts(shape.to_vec(), out), &[x])
    }

    fn check_row_op(&self, op: &'static str, x: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let (rows, cols) = last_dim(vx);
        if vb.numel() != cols || vb.shape().len() != 1 {
            return Err(Error::shape(op, format!("{:?} with row {:?}", vx.shape(), vb.shape())));
        }
        Ok((rows, cols))
    }

    /// Adds a `[D]` vector to every row of `x` (`[.., D]`).
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, cols) = self.check_row_op("add_row", x, b)?;
        let vx = &self.nodes[x.0].value;
        let vb = self.nodes[b.0].value.data();
        let out: Vec<f64> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e + vb[i % cols])
            .collect();
        let shape = vx.shape().to_vec();
        self.push(Op::AddRow(x, b), Tensor::from_parts(shape, out), &[x, b])
    }

    /// Multiplies every row of `x` elementwise by a `[D]` vector.
    pub fn mul_row(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (_, cols) = self.check_row_op("mul_row", x, g)?;
        let vx = &self.nodes[x.0].value;
        let vg = self.nodes[g.0].value.data();
        let out: Vec<f64> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * vg[i % cols])
            .collect();
        let shape = vx.shape().to_vec();
        self.push(Op::MulRow(x, g), Tensor::from_parts(shape, out), &[x, g])
    }

    /// Per-column standardization of a `[B, D]` tensor with batch statistics
    /// (biased variance). No affine transform.
    pub fn batch_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = v
            .dims2()
            .ok_or_else(|| Error::shape("batch_norm", format!("{:?}", v.shape())))?;
        let d = v.data();
        let (mean, var) = column_moments(d, rows, cols);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = (d[r * cols + c] - mean[c]) * inv_std[c];
            }
        }
        self.push(
            Op::BatchNorm { x, inv_std },
            Tensor::from_parts(vec![rows, cols], out),
            &[x],
        )
    }

    /// `k x k` average pooling of an `[h*w, C]` (row-major HWC) feature map.
    pub fn avg_pool(&mut self, x: NodeId, h: usize, w: usize, k: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (rows, c) = v
            .dims2()
            .ok_or_else(|| Error::shape("avg_pool", format!("{:?}", v.shape())))?;
        if rows != h * w || k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("{:?} as {h}x{w} with window {k}", v.shape()),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let d = v.data();
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (oy * wo + ox) * c;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = ((oy * k + dy) * w + ox * k + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += d[i + ch] * scale;
                        }
                    }
                }
            }
        }
        self.push(
            Op::AvgPool { x, w, k },
            Tensor::from_parts(vec![ho * wo, c], out),
            &[x],
        )
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept only once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = node.value.data();
            match &node.op {
                Op::Leaf | Op::Param { .. } | Op::Detach => {}
                Op::Binary { kind, a, b, bcast } => {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    let at = |i: usize, v: &[f64], scalar: bool| if scalar { v[0] } else { v[i] };
                    let (sa, sb) = (*bcast == Bcast::LeftScalar, *bcast == Bcast::RightScalar);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (i, gi) in g.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add | BinKind::Sub => *gi,
                                BinKind::Mul => gi * at(i, vb, sb),
                                BinKind::Div => gi / at(i, vb, sb),
                            };
                            if sa {
                                ga[0] += d;
                            } else {
                                ga[i] += d;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (i, gi) in g.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add => *gi,
                                BinKind::Sub => -gi,
                                BinKind::Mul => gi * at(i, va, sa),
                                BinKind::Div => {
                                    let den = at(i, vb, sb);
                                    -gi * at(i, va, sa) / (den * den)
                                }
                            };
                            if sb {
                                gb[0] += d;
                            } else {
                                gb[i] += d;
                            }
                        }
                    }
                }
                Op::AddScalar(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_assign(gx, &g);
                    }
                }
                Op::MulScalar(x, c) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, gi)| *d += c * gi);
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let (m, k) = va.dims2().unwrap();
                    let n = vb.dims2().unwrap().1;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        // dA += G (m x n) * B^T (n x k)
                        matmul_into(m, n, k, (&g, n as isize, 1), (vb.data(), 1, n as isize), ga, 1.0);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        // dB += A^T (k x m) * G (m x n)
                        matmul_into(k, m, n, (va.data(), 1, k as isize), (&g, n as isize, 1), gb, 1.0);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = nodes[x.0].value.dims2().unwrap();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            if vx[i] > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] * y[i];
                        }
                    }
                }
                Op::Log(x) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] / (vx[i] + EPS);
                        }
                    }
                }
                Op::Neg(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, gi)| *d -= gi);
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Powf(x, p) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        if *p != 0.0 {
                            for i in 0..g.len() {
                                gx[i] += g[i] * p * vx[i].powf(p - 1.0);
                            }
                        }
                    }
                }
                Op::SmoothL1(x, beta) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            let v = vx[i];
                            let d = if v.abs() < *beta { v / beta } else { v.signum() };
                            gx[i] += g[i] * d;
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            if vx[i] >= *lo && vx[i] <= *hi {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let s = g[0] / gx.len() as f64;
                        gx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::SumLast(x) => {
                    let (_, cols) = last_dim(&nodes[x.0].value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, row) in gx.chunks_mut(cols).enumerate() {
                            row.iter_mut().for_each(|d| *d += g[r]);
                        }
                    }
                }
                Op::MaxLast { x, argmax } => {
                    let (_, cols) = last_dim(&nodes[x.0].value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &c) in argmax.iter().enumerate() {
                            gx[r * cols + c] += g[r];
                        }
                    }
                }
                Op::Softmax(x) => {
                    let (_, cols) = last_dim(&node.value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                gx[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let (_, cols) = last_dim(&node.value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                            let gs: f64 = gr.iter().sum();
                            for c in 0..cols {
                                gx[r * cols + c] += gr[c] - yr[c].exp() * gs;
                            }
                        }
                    }
                }
                Op::LogSumExpLast { x, mask } => {
                    let vx = nodes[x.0].value.data();
                    let (_, cols) = last_dim(&nodes[x.0].value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (i, d) in gx.iter_mut().enumerate() {
                            let r = i / cols;
                            if mask.as_ref().is_none_or(|m| m[i]) {
                                *d += g[r] * (vx[i] - y[r]).exp();
                            }
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let (_, cols) = last_dim(&node.value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                gx[r * cols + c] += (gr[c] - yr[c] * dot) / norms[r];
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, inner) = outer_inner(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for id in inputs {
                        let len = nodes[id.0].value.shape()[*axis] * inner;
                        if let Some(gi) = slot(&mut grads, nodes, *id) {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + len];
                                add_assign(&mut gi[o * len..(o + 1) * len], src);
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let shape = nodes[x.0].value.shape();
                    let (outer, inner) = outer_inner(shape, *axis);
                    let full = shape[*axis] * inner;
                    let part = node.value.shape()[*axis] * inner;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            let dst = &mut gx[o * full + start * inner..o * full + start * inner + part];
                            add_assign(dst, &g[o * part..(o + 1) * part]);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_assign(gx, &g);
                    }
                }
                Op::Gather { x, index } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (gi, j) in g.iter().zip(index.iter()) {
                            if let Some(j) = j {
                                gx[*j] += gi;
                            }
                        }
                    }
                }
                Op::AddRow(x, b) => {
                    let cols = nodes[b.0].value.numel();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_assign(gx, &g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for row in g.chunks(cols) {
                            add_assign(gb, row);
                        }
                    }
                }
                Op::MulRow(x, w) => {
                    let vx = nodes[x.0].value.data();
                    let vw = nodes[w.0].value.data();
                    let cols = vw.len();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] * vw[i % cols];
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for i in 0..g.len() {
                            gw[i % cols] += g[i] * vx[i];
                        }
                    }
                }
                Op::BatchNorm { x, inv_std } => {
                    let (rows, cols) = node.value.dims2().unwrap();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let mut gsum = vec![0.0; cols];
                        let mut gysum = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                gsum[c] += g[r * cols + c];
                                gysum[c] += g[r * cols + c] * y[r * cols + c];
                            }
                        }
                        let b = rows as f64;
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                gx[i] += inv_std[c] / b * (b * g[i] - gsum[c] - y[i] * gysum[c]);
                            }
                        }
                    }
                }
                Op::AvgPool { x, w, k } => {
                    let c = node.value.dims2().unwrap().1;
                    let wo = w / k;
                    let scale = 1.0 / (k * k) as f64;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (o, go) in g.chunks(c).enumerate() {
                            let (oy, ox) = (o / wo, o % wo);
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    let i = ((oy * k + dy) * w + ox * k + dx) * c;
                                    for ch in 0..c {
                                        gx[i + ch] += go[ch] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, index } => Some((store, index, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// Stable `ln(sum(exp(v)))`; negative infinity for an empty iterator.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Column means and biased variances of a row-major `[rows, cols]` buffer.
pub fn column_moments(d: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += d[r * cols + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let e = d[r * cols + c] - mean[c];
            var[c] += e * e;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    (mean, var)
}
