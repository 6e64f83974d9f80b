use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Every differentiable operation the graph records.
///
/// Shapes are never broadcast implicitly: elementwise kinds require identical
/// shapes, and the only tiling op is [`OpKind::BroadcastRows`], which repeats a
/// single row an explicit number of times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    Transpose,
    Concat(Axis),
    Slice {
        axis: Axis,
        start: usize,
        end: usize,
    },
    /// Sum of all entries, giving a `1 × 1` tensor.
    Sum,
    /// Mean of all entries, giving a `1 × 1` tensor.
    Mean,
    /// Column sums, `n × m → 1 × m`.
    SumRows,
    /// Repeat a `1 × m` row `n` times.
    BroadcastRows(usize),
    Tanh,
    Sigmoid,
    Relu,
    /// ELU with slope 1: `x` for `x > 0`, `eˣ − 1` otherwise.
    Elu,
    SoftmaxRows,
    /// Row-wise `x − logsumexp(x)`.
    LogSoftmaxRows,
    Exp,
    Log,
    Square,
    Negate,
    Cos,
    Scale(f64),
    /// Pairwise L1 distances between the rows of two matrices, `n × d, c × d → n × c`.
    L1Distances,
    /// `A⁻¹ B` for symmetric positive-definite `A`, via Cholesky.
    SolveSpd,
}

impl OpKind {
    fn arity(self) -> Option<usize> {
        use OpKind::*;
        match self {
            Add | Sub | Mul | MatMul | L1Distances | SolveSpd => Some(2),
            Concat(_) => None,
            _ => Some(1),
        }
    }

    fn name(self) -> &'static str {
        use OpKind::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            MatMul => "matmul",
            Transpose => "transpose",
            Concat(_) => "concat",
            Slice { .. } => "slice",
            Sum => "sum",
            Mean => "mean",
            SumRows => "sum_rows",
            BroadcastRows(_) => "broadcast_rows",
            Tanh => "tanh",
            Sigmoid => "sigmoid",
            Relu => "relu",
            Elu => "elu",
            SoftmaxRows => "softmax_rows",
            LogSoftmaxRows => "log_softmax_rows",
            Exp => "exp",
            Log => "log",
            Square => "square",
            Negate => "negate",
            Cos => "cos",
            Scale(_) => "scale",
            L1Distances => "l1_distances",
            SolveSpd => "solve_spd",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Cholesky factor kept by `SolveSpd` for the backward solve.
    factor: Option<Tensor>,
}

/// Append-only record of operations. Parents always precede children, so the
/// append order is a valid topological order for the backward sweep.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            check_finite: true,
        }
    }

    /// Enables or disables the per-op NaN/Inf check (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    fn push(&mut self, kind: Option<OpKind>, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            factor: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(None, Vec::new(), value)
    }

    /// The leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(None, Vec::new(), store.get(id).clone());
        self.param_nodes.insert(id, node);
        node
    }

    /// Applies `kind` to `inputs`, recording the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} expects {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} needs at least one input",
                kind.name()
            )));
        }
        let (value, factor) = self.forward(kind, inputs)?;
        if self.check_finite {
            value.check_finite(kind.name())?;
        }
        let id = self.push(Some(kind), inputs.to_vec(), value);
        self.nodes[id.0].factor = factor;
        Ok(id)
    }

    fn forward(&self, kind: OpKind, inputs: &[NodeId]) -> Result<(Tensor, Option<Tensor>)> {
        use OpKind::*;
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let same_shape = |op: &'static str| -> Result<()> {
            if v(0).shape() != v(1).shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    left: v(0).shape().to_vec(),
                    right: v(1).shape().to_vec(),
                });
            }
            Ok(())
        };
        let out = match kind {
            Add => {
                same_shape("add")?;
                v(0).zip_map(v(1), |a, b| a + b)
            }
            Sub => {
                same_shape("sub")?;
                v(0).zip_map(v(1), |a, b| a - b)
            }
            Mul => {
                same_shape("mul")?;
                v(0).zip_map(v(1), |a, b| a * b)
            }
            MatMul => v(0).matmul(v(1))?,
            Transpose => v(0).transpose(),
            Concat(axis) => concat(inputs.iter().map(|i| &self.nodes[i.0].value), axis)?,
            Slice { axis, start, end } => slice(v(0), axis, start, end)?,
            Sum => Tensor::scalar(v(0).sum()),
            Mean => Tensor::scalar(v(0).sum() / v(0).numel() as f64),
            SumRows => {
                let x = v(0);
                let mut out = vec![0.0; x.cols()];
                for r in 0..x.rows() {
                    for (o, &xv) in out.iter_mut().zip(x.row_slice(r)) {
                        *o += xv;
                    }
                }
                Tensor::matrix(1, x.cols(), out)
            }
            BroadcastRows(n) => {
                let x = v(0);
                if x.rows() != 1 || n == 0 {
                    return Err(Error::ShapeMismatch {
                        op: "broadcast_rows",
                        left: x.shape().to_vec(),
                        right: vec![n, x.cols()],
                    });
                }
                Tensor::matrix(n, x.cols(), x.data().repeat(n))
            }
            Tanh => v(0).map(f64::tanh),
            Sigmoid => v(0).map(sigmoid),
            Relu => v(0).map(|x| x.max(0.0)),
            Elu => v(0).map(elu),
            SoftmaxRows => softmax_rows(v(0)),
            LogSoftmaxRows => log_softmax_rows(v(0)),
            Exp => v(0).map(f64::exp),
            Log => v(0).map(f64::ln),
            Square => v(0).map(|x| x * x),
            Negate => v(0).map(|x| -x),
            Cos => v(0).map(f64::cos),
            Scale(c) => v(0).map(|x| c * x),
            L1Distances => {
                let (q, k) = (v(0), v(1));
                if q.cols() != k.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "l1_distances",
                        left: q.shape().to_vec(),
                        right: k.shape().to_vec(),
                    });
                }
                Tensor::from_fn(q.rows(), k.rows(), |i, j| {
                    q.row_slice(i)
                        .iter()
                        .zip(k.row_slice(j))
                        .map(|(a, b)| (a - b).abs())
                        .sum()
                })
            }
            SolveSpd => {
                let (a, b) = (v(0), v(1));
                if a.rows() != a.cols() || b.rows() != a.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "solve_spd",
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                let l = linalg::cholesky(a)?;
                let x = linalg::cholesky_solve(&l, b)?;
                return Ok((x, Some(l)));
            }
        };
        Ok((out, None))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(1, 1).reshape(loss_value.shape().to_vec())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(kind) = node.kind {
                for (input, contribution) in self.local_grads(node, kind, &g)? {
                    accumulate(&mut grads, input, contribution);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, NodeId)> =
            self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Ok(Gradients {
            node_grads: grads,
            param_nodes: params,
        })
    }

    fn local_grads(&self, node: &Node, kind: OpKind, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        use OpKind::*;
        let inp = &node.inputs;
        let x = |i: usize| &self.nodes[inp[i].0].value;
        let y = &node.value;
        let unary = |t: Tensor| Ok(vec![(inp[0], t)]);
        match kind {
            Add => Ok(vec![(inp[0], g.clone()), (inp[1], g.clone())]),
            Sub => Ok(vec![(inp[0], g.clone()), (inp[1], g.map(|v| -v))]),
            Mul => Ok(vec![
                (inp[0], g.zip_map(x(1), |a, b| a * b)),
                (inp[1], g.zip_map(x(0), |a, b| a * b)),
            ]),
            MatMul => Ok(vec![
                (inp[0], g.matmul_nt(x(1))?),
                (inp[1], x(0).matmul_tn(g)?),
            ]),
            Transpose => unary(g.transpose()),
            Concat(axis) => {
                let mut out = Vec::with_capacity(inp.len());
                let mut offset = 0;
                for &part in inp {
                    let pv = &self.nodes[part.0].value;
                    let len = match axis {
                        Axis::Rows => pv.rows(),
                        Axis::Cols => pv.cols(),
                    };
                    let piece = slice(g, axis, offset, offset + len)?.reshape(pv.shape().to_vec())?;
                    out.push((part, piece));
                    offset += len;
                }
                Ok(out)
            }
            Slice { axis, start, end } => {
                let src = x(0);
                let mut full = Tensor::zeros_like(src);
                let cols = src.cols();
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let (sr, sc) = match axis {
                            Axis::Rows => (r + start, c),
                            Axis::Cols => (r, c + start),
                        };
                        full.data_mut()[sr * cols + sc] = g.get(r, c);
                    }
                }
                debug_assert!(end > start);
                unary(full)
            }
            Sum => {
                let s = g.item();
                unary(x(0).map(|_| s))
            }
            Mean => {
                let s = g.item() / x(0).numel() as f64;
                unary(x(0).map(|_| s))
            }
            SumRows => {
                let src = x(0);
                let gd = g.data();
                unary(Tensor::from_fn(src.rows(), src.cols(), |_, c| gd[c]).reshape(src.shape().to_vec())?)
            }
            BroadcastRows(_) => {
                let mut acc = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (a, &gv) in acc.iter_mut().zip(g.row_slice(r)) {
                        *a += gv;
                    }
                }
                unary(Tensor::matrix(1, g.cols(), acc).reshape(x(0).shape().to_vec())?)
            }
            Tanh => unary(g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Sigmoid => unary(g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Relu => unary(g.zip_map(x(0), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Elu => unary(
                g.zip_map(x(0), |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() }),
            ),
            SoftmaxRows => {
                let mut out = Tensor::zeros_like(y);
                let cols = y.cols();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        out.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                unary(out)
            }
            LogSoftmaxRows => {
                let mut out = g.clone();
                let cols = y.cols();
                for r in 0..y.rows() {
                    let total: f64 = g.row_slice(r).iter().sum();
                    for c in 0..cols {
                        out.data_mut()[r * cols + c] -= y.get(r, c).exp() * total;
                    }
                }
                unary(out)
            }
            Exp => unary(g.zip_map(y, |gv, yv| gv * yv)),
            Log => unary(g.zip_map(x(0), |gv, xv| gv / xv)),
            Square => unary(g.zip_map(x(0), |gv, xv| 2.0 * gv * xv)),
            Negate => unary(g.map(|v| -v)),
            Cos => unary(g.zip_map(x(0), |gv, xv| -gv * xv.sin())),
            Scale(c) => unary(g.map(|v| c * v)),
            L1Distances => {
                let (q, k) = (x(0), x(1));
                let d = q.cols();
                let mut gq = Tensor::zeros_like(q);
                let mut gk = Tensor::zeros_like(k);
                for i in 0..q.rows() {
                    for j in 0..k.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let s = sign(q.get(i, c) - k.get(j, c)) * gij;
                            gq.data_mut()[i * d + c] += s;
                            gk.data_mut()[j * d + c] -= s;
                        }
                    }
                }
                Ok(vec![(inp[0], gq), (inp[1], gk)])
            }
            SolveSpd => {
                let l = node.factor.as_ref().expect("solve_spd keeps its factor");
                let gb = linalg::cholesky_solve(l, g)?;
                let ga = gb.matmul_nt(y)?.map(|v| -v);
                Ok(vec![(inp[0], ga), (inp[1], gb)])
            }
        }
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        self.apply(OpKind::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SumRows, &[a])
    }
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.apply(OpKind::BroadcastRows(n), &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Elu, &[a])
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmaxRows, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn negate(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Negate, &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Cos, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn l1_distances(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        self.apply(OpKind::L1Distances, &[q, k])
    }
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SolveSpd, &[a, b])
    }

    /// Row-wise mean, `n × m → 1 × m`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).rows() as f64;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n)
    }
}

/// Gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` when it does not reach the loss.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.node_grads.get(node.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter in `store`; unreachable parameters get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(Tensor::zeros_like).collect();
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = self.wrt(node) {
                out[pid.0] = g.clone();
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Max-shifted row softmax.
fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = Tensor::zeros_like(x);
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for d in &mut out.data_mut()[r * cols..(r + 1) * cols] {
            *d -= lse;
        }
    }
    out
}

fn concat<'a>(parts: impl Iterator<Item = &'a Tensor>, axis: Axis) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.collect();
    let first = parts[0];
    match axis {
        Axis::Rows => {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in &parts {
                if p.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: first.shape().to_vec(),
                        right: p.shape().to_vec(),
                    });
                }
                data.extend_from_slice(p.data());
                rows += p.rows();
            }
            Ok(Tensor::matrix(rows, cols, data))
        }
        Axis::Cols => {
            let rows = first.rows();
            if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in &parts {
                    data.extend_from_slice(p.row_slice(r));
                }
            }
            Ok(Tensor::matrix(rows, cols, data))
        }
    }
}

fn slice(x: &Tensor, axis: Axis, start: usize, end: usize) -> Result<Tensor> {
    let limit = match axis {
        Axis::Rows => x.rows(),
        Axis::Cols => x.cols(),
    };
    if start >= end || end > limit {
        return Err(Error::InvalidArgument(format!(
            "slice {start}..{end} out of range for shape {:?} along {axis:?}",
            x.shape()
        )));
    }
    Ok(match axis {
        Axis::Rows => {
            let c = x.cols();
            Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())
        }
        Axis::Cols => Tensor::from_fn(x.rows(), end - start, |r, c| x.get(r, start + c)),
    })
}
