use std::borrow::Cow;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded at a node, with any non-tensor operands.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul,
    /// Elementwise sum; the right operand may be a row vector broadcast over rows.
    Add,
    Sub,
    /// Elementwise product; the right operand may be a row vector broadcast over rows.
    Mul,
    Scale(f64),
    AddConst(f64),
    Neg,
    Sigmoid,
    /// `log σ(x)`, evaluated without forming σ(x).
    LogSigmoid,
    Log,
    Exp,
    /// Elementwise `max(x, 0)`; the adjoint at exactly 0 is 0.
    Max0,
    /// Tanh approximation of GELU.
    Gelu,
    Sum,
    Mean,
    EmbeddingLookup(Vec<usize>),
    LogSoftmaxRows,
    /// Row softmax of a square score matrix where row `t` only sees columns `0..=t`.
    CausalSoftmaxRows,
    /// Picks `x[r, c]` for every `(r, c)` into a vector.
    GatherRows(Vec<(usize, usize)>),
    SliceCols { start: usize, len: usize },
    ConcatCols,
    Transpose,
    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    LayerNormRows { eps: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddConst(_) => "add_const",
            OpKind::Neg => "neg",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Max0 => "max0",
            OpKind::Gelu => "gelu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::EmbeddingLookup(_) => "embedding_lookup",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::CausalSoftmaxRows => "causal_softmax_rows",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Transpose => "transpose",
            OpKind::LayerNormRows { .. } => "layer_norm_rows",
        }
    }
}

struct Node<'p> {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every op is evaluated as soon as it is recorded, so node ids are already in
/// topological order. Leaves may borrow their tensors (model parameters) for
/// the lifetime `'p` of the graph.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros shaped like `like` when no adjoint reached it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    a.ndim() == 2 && b.ndim() == 1 && a.shape()[1] == b.shape()[0]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Scalar value of a node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf owning its tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(OpKind::Leaf, Vec::new(), Cow::Owned(value), requires_grad)
    }

    /// Leaf borrowing an existing tensor (no copy).
    pub fn param(&mut self, value: &'p Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(OpKind::Leaf, Vec::new(), Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} does not exist (graph has {} nodes)",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(
        &mut self,
        op: OpKind,
        inputs: Vec<NodeId>,
        value: Cow<'p, Tensor>,
        leaf_requires_grad: bool,
    ) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let requires_grad = if inputs.is_empty() {
            leaf_requires_grad
        } else {
            inputs.iter().any(|i| self.nodes[i.0].requires_grad)
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn push_op(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        self.push(op, inputs, Cow::Owned(value), false)
    }

    fn map_unary(&mut self, op: OpKind, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op(op, vec![a], out)
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() && !is_row_broadcast(x, y) {
            return Err(Error::Dimension(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    fn zip_broadcast(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let yd = y.data();
        let n = yd.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, yd[i % n]))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape as lhs")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {:?} by {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push_op(OpKind::MatMul, vec![a, b], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        self.push_op(OpKind::Add, vec![a, b], out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "sub")?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        self.push_op(OpKind::Sub, vec![a, b], out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        self.push_op(OpKind::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map_unary(OpKind::Scale(c), a, |x| c * x)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map_unary(OpKind::AddConst(c), a, |x| x + c)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::Neg, a, |x| -x)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::Sigmoid, a, sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::LogSigmoid, a, log_sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::Log, a, f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::Exp, a, f64::exp)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::Gelu, a, gelu)
    }

    pub fn max0(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(OpKind::Max0, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.value(a).data().iter().sum();
        self.push_op(OpKind::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let s: f64 = x.data().iter().sum();
        let m = s / x.len() as f64;
        self.push_op(OpKind::Mean, vec![a], Tensor::scalar(m))
    }

    /// Rows of `table` selected by `ids`, as a `[ids.len() × d]` matrix.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check_id(table)?;
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "embedding table must be 2-D, got {:?}",
                t.shape()
            )));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Dimension(format!(
                    "embedding id {id} out of range for table of {v} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push_op(OpKind::EmbeddingLookup(ids.to_vec()), vec![table], out)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        let (rows, cols) = x.as_matrix_dims()?;
        if cols == 0 {
            return Err(Error::Dimension("log_softmax over zero columns".into()));
        }
        let mut out = x.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push_op(OpKind::LogSoftmaxRows, vec![a], out)
    }

    pub fn causal_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        if x.ndim() != 2 || x.shape()[0] != x.shape()[1] {
            return Err(Error::Dimension(format!(
                "causal softmax needs a square matrix, got {:?}",
                x.shape()
            )));
        }
        let t = x.shape()[0];
        let mut out = vec![0.0; t * t];
        for r in 0..t {
            let src = &x.data()[r * t..r * t + r + 1];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * t..r * t + r + 1];
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(vec![t, t], out)?;
        self.push_op(OpKind::CausalSoftmaxRows, vec![a], out)
    }

    pub fn gather(&mut self, a: NodeId, index: &[(usize, usize)]) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        let (rows, cols) = x.as_matrix_dims()?;
        let mut out = Vec::with_capacity(index.len());
        for &(r, c) in index {
            if r >= rows || c >= cols {
                return Err(Error::Dimension(format!(
                    "gather index ({r}, {c}) outside {rows}×{cols}"
                )));
            }
            out.push(x.data()[r * cols + c]);
        }
        self.push_op(OpKind::GatherRows(index.to_vec()), vec![a], Tensor::vector(out))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        if x.ndim() != 2 || start + len > x.shape()[1] {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], out)?;
        self.push_op(OpKind::SliceCols { start, len }, vec![a], out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        for &p in parts {
            self.check_id(p)?;
        }
        let rows = self.value(parts[0]).shape().first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: part of shape {s:?} does not have {rows} rows"
                )));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push_op(OpKind::ConcatCols, parts.to_vec(), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(Error::Dimension(format!("transpose of {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.push_op(OpKind::Transpose, vec![a], out)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.check_id(a)?;
        let x = self.value(a);
        let (rows, cols) = x.as_matrix_dims()?;
        let mut out = x.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push_op(OpKind::LayerNormRows { eps }, vec![a], out)
    }

    /// Reverse pass from a scalar sink.
    ///
    /// Each node is visited once in reverse topological order; adjoints of a
    /// node consumed several times are summed. Only nodes that transitively
    /// depend on a `requires_grad` leaf receive adjoints.
    pub fn backward(&self, sink: NodeId) -> Result<Gradients> {
        self.check_id(sink)?;
        if !self.value(sink).is_scalar() {
            return Err(Error::Contract(format!(
                "backward sink must be scalar, got shape {:?}",
                self.value(sink).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[sink.0].requires_grad {
            grads[sink.0] = Some(vec![1.0]);
        }
        for idx in (0..=sink.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("adjoint shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let input = |k: usize| node.inputs[k];
        let val = |k: usize| -> &Tensor { &self.nodes[node.inputs[k].0].value };
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;

        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[id.0].value.len();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };

        match &node.op {
            OpKind::Leaf => {}
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(0) {
                    acc(input(0), &mut |g| {
                        gemm(m, n, k, dy, false, b.data(), true, g, true)
                    });
                }
                if wants(1) {
                    acc(input(1), &mut |g| {
                        gemm(k, m, n, a.data(), true, dy, false, g, true)
                    });
                }
            }
            OpKind::Add | OpKind::Sub => {
                let sign = if matches!(node.op, OpKind::Sub) { -1.0 } else { 1.0 };
                if wants(0) {
                    acc(input(0), &mut |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
                    });
                }
                if wants(1) {
                    acc(input(1), &mut |g| {
                        let n = g.len();
                        for (i, d) in dy.iter().enumerate() {
                            g[i % n] += sign * d;
                        }
                    });
                }
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let (ad, bd) = (a.data(), b.data());
                let n = bd.len();
                if wants(0) {
                    acc(input(0), &mut |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i] += d * bd[i % n];
                        }
                    });
                }
                if wants(1) {
                    acc(input(1), &mut |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % n] += d * ad[i];
                        }
                    });
                }
            }
            OpKind::Scale(c) => acc(input(0), &mut |g| {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)
            }),
            OpKind::AddConst(_) => acc(input(0), &mut |g| {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
            }),
            OpKind::Neg => acc(input(0), &mut |g| {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d)
            }),
            OpKind::Sigmoid => acc(input(0), &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            OpKind::LogSigmoid => {
                let x = val(0).data();
                acc(input(0), &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sigmoid(-x[i]);
                    }
                })
            }
            OpKind::Log => {
                let x = val(0).data();
                acc(input(0), &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / x[i];
                    }
                })
            }
            OpKind::Exp => acc(input(0), &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i];
                }
            }),
            OpKind::Max0 => {
                let x = val(0).data();
                acc(input(0), &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                })
            }
            OpKind::Gelu => {
                let x = val(0).data();
                acc(input(0), &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(x[i]);
                    }
                })
            }
            OpKind::Sum => acc(input(0), &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            OpKind::Mean => {
                let n = val(0).len() as f64;
                acc(input(0), &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n))
            }
            OpKind::EmbeddingLookup(ids) => {
                let d = val(0).shape()[1];
                acc(input(0), &mut |g| {
                    for (t, &id) in ids.iter().enumerate() {
                        let src = &dy[t * d..(t + 1) * d];
                        g[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, s)| *g += s);
                    }
                })
            }
            OpKind::LogSoftmaxRows => {
                let cols = node.value.as_matrix_dims().expect("matrix").1;
                acc(input(0), &mut |g| {
                    for (r, (yr, dr)) in y.chunks(cols).zip(dy.chunks(cols)).enumerate() {
                        let total: f64 = dr.iter().sum();
                        let gr = &mut g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            OpKind::CausalSoftmaxRows => {
                let t = node.value.shape()[0];
                acc(input(0), &mut |g| {
                    for r in 0..t {
                        let yr = &y[r * t..r * t + r + 1];
                        let dr = &dy[r * t..r * t + r + 1];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        let gr = &mut g[r * t..r * t + r + 1];
                        for j in 0..=r {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                })
            }
            OpKind::GatherRows(index) => {
                let cols = val(0).as_matrix_dims().expect("matrix").1;
                acc(input(0), &mut |g| {
                    for (&(r, c), d) in index.iter().zip(dy) {
                        g[r * cols + c] += d;
                    }
                })
            }
            OpKind::SliceCols { start, len } => {
                let cols = val(0).shape()[1];
                acc(input(0), &mut |g| {
                    for (r, dr) in dy.chunks(*len).enumerate() {
                        g[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(g, d)| *g += d);
                    }
                })
            }
            OpKind::ConcatCols => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let w = val(k).shape()[1];
                    if wants(k) {
                        acc(input(k), &mut |g| {
                            for (r, gr) in g.chunks_mut(w).enumerate() {
                                let src = &dy[r * total + offset..r * total + offset + w];
                                gr.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                            }
                        });
                    }
                    offset += w;
                }
            }
            OpKind::Transpose => {
                let (r, c) = (val(0).shape()[0], val(0).shape()[1]);
                acc(input(0), &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                })
            }
            OpKind::LayerNormRows { eps } => {
                let x = val(0);
                let cols = x.as_matrix_dims().expect("matrix").1;
                let n = cols as f64;
                acc(input(0), &mut |g| {
                    for (r, xr) in x.data().chunks(cols).enumerate() {
                        let mu = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let mean_d = dr.iter().sum::<f64>() / n;
                        let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / n;
                        let gr = &mut g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            gr[j] += inv * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                })
            }
        }
    }
}
