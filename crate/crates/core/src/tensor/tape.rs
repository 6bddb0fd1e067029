//! Eager tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation computes its value immediately and appends a
//! node to the tape. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because inputs are always
//! recorded before their consumers.

use std::collections::HashMap;

use super::kernels;
use super::special::{digamma, trigamma};
use super::{Tensor, NORM_FLOOR};
use crate::error::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and for fault injection in the
/// gradient checker's own tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Softplus,
    SoftmaxRows,
    LayerNorm,
    ConcatCols,
    ConcatRows,
    GatherRows,
    SegmentMean,
    L2NormalizeRows,
    Gather,
    SliceCols,
    Sum,
    Digamma,
    SmoothL1,
    BceWithLogits,
    Diou1d,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::SegmentMean => "segment_mean",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::Gather => "gather",
            OpKind::SliceCols => "slice_cols",
            OpKind::Sum => "sum",
            OpKind::Digamma => "digamma",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Diou1d => "diou_1d",
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, k: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize> },
    SegmentMean { x: Var, groups: Vec<Vec<usize>> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Sum { x: Var },
    Digamma { x: Var },
    SmoothL1 { x: Var, beta: f64 },
    BceWithLogits { x: Var, targets: Vec<f64> },
    Diou1d { pred: Var, gt: Vec<(f64, f64)> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulNt { .. } => OpKind::MatMulNt,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softplus { .. } => OpKind::Softplus,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Sum { .. } => OpKind::Sum,
            Op::Digamma { .. } => OpKind::Digamma,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::Diou1d { .. } => OpKind::Diou1d,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulNt { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softplus { x }
            | Op::SoftmaxRows { x }
            | Op::GatherRows { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Sum { x }
            | Op::Digamma { x }
            | Op::SmoothL1 { x, .. }
            | Op::BceWithLogits { x, .. } => vec![*x],
            Op::Diou1d { pred, .. } => vec![*pred],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    fault: Option<(OpKind, f64)>,
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiplies the input gradients emitted by every `kind` node by `factor`.
    /// Only meant for validating gradient checkers.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a trainable parameter; repeated calls with the same id return
    /// the same node.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: kind.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(dim_err(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b })
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(dim_err("matmul_nt", format!("widths {k} and {k2} differ")));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt { a, b })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        self.same_shape(op.kind().name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(dim_err(
                "add_row",
                format!("row width {n}, bias length {}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, TensorError> {
        self.map(x, |v| v * k, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.map(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map(x, kernels::softplus, Op::Softplus { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        kernels::softmax_rows_inplace(value.data_mut(), cols);
        self.push(value, Op::SoftmaxRows { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = t.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if d == 0 || g.len() != d || b.len() != d {
            return Err(dim_err(
                "layer_norm",
                format!("width {d}, gain {}, bias {}", g.len(), b.len()),
            ));
        }
        let (out, xhat, rstd) = kernels::layer_norm(t.data(), g.data(), b.data(), d, eps);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| dim_err("concat_cols", "no inputs".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(dim_err("concat_cols", "row counts differ".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push(value, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Vertical stacking of matrices with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| dim_err("concat_rows", "no inputs".into()))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(dim_err("concat_rows", "widths differ".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(value, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        self.push(value, Op::GatherRows { x, index })
    }

    /// Output row `g` is the mean of the input rows listed in `groups[g]`.
    pub fn segment_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(dim_err("segment_mean", format!("group {g} is empty")));
            }
            let out = &mut data[g * cols..(g + 1) * cols];
            for &r in members {
                if r >= rows {
                    return Err(dim_err("segment_mean", format!("row {r} out of {rows}")));
                }
                for (o, v) in out.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![groups.len(), cols], data)?;
        self.push(value, Op::SegmentMean { x, groups })
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(cols) {
            let n = kernels::norm(row);
            if n <= NORM_FLOOR {
                return Err(TensorError::DegenerateVector {
                    op: "l2_normalize_rows",
                    norm: n,
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::L2NormalizeRows { x, norms })
    }

    /// Flat element gather into a vector.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(dim_err("gather", format!("element {bad} out of {}", t.len())));
        }
        let data: Vec<f64> = index.iter().map(|&i| t.data()[i]).collect();
        self.push(Tensor::vector(data), Op::Gather { x, index })
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start + width > cols {
            return Err(dim_err("slice_cols", format!("{start}+{width} > {cols}")));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let value = Tensor::new(vec![rows, width], data)?;
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(dim_err("mean", "empty input".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| digamma(v)).collect::<Result<Vec<_>, _>>()?;
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Digamma { x })
    }

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var, TensorError> {
        self.map(x, |v| kernels::smooth_l1(v, beta), Op::SmoothL1 { x, beta })
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<f64>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if targets.len() != t.len() || t.is_empty() {
            return Err(dim_err(
                "bce_with_logits",
                format!("{} logits, {} targets", t.len(), targets.len()),
            ));
        }
        let n = t.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| kernels::softplus(z) - y * z)
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::BceWithLogits { x, targets })
    }

    /// Row-wise one-dimensional DIoU between predicted segments `pred[n×2]`
    /// (start, end) and fixed ground-truth segments.
    pub fn diou_1d(&mut self, pred: Var, gt: Vec<(f64, f64)>) -> Result<Var, TensorError> {
        let t = self.value(pred);
        if t.cols() != 2 || t.rows() != gt.len() {
            return Err(dim_err(
                "diou_1d",
                format!("pred {:?} vs {} ground truths", t.shape(), gt.len()),
            ));
        }
        if let Some(g) = gt.iter().find(|g| !(g.1 > g.0)) {
            return Err(TensorError::Contract(format!("degenerate ground truth {g:?}")));
        }
        let data = (0..gt.len())
            .map(|i| diou_terms(t.get(i, 0), t.get(i, 1), gt[i]).0)
            .collect();
        self.push(Tensor::vector(data), Op::Diou1d { pred, gt })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            let factor = match self.fault {
                Some((kind, f)) if kind == node.op.kind() => f,
                _ => 1.0,
            };
            for (input, mut dg) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if factor != 1.0 {
                    dg.iter_mut().for_each(|v| *v *= factor);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|data| Tensor::new(n.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let da = kernels::matmul_nt(g, val(*b).data(), m, n, k);
                let db = kernels::matmul_tn(val(*a).data(), g, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::MatMulNt { a, b } => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                let da = kernels::matmul(g, val(*b).data(), m, n, k);
                let db = kernels::matmul_tn(g, val(*a).data(), m, n, k);
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow { x, bias } => {
                let n = val(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Scale { x, k } => vec![(*x, g.iter().map(|v| v * k).collect())],
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::Relu { x } => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Sigmoid { x } => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                vec![(*x, d)]
            }
            Op::Softplus { x } => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| g * kernels::sigmoid(v))
                    .collect();
                vec![(*x, d)]
            }
            Op::SoftmaxRows { x } => {
                let cols = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; g.len()];
                for r in 0..y.len() / cols.max(1) {
                    let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let inner = kernels::dot(ys, gs);
                    for j in 0..cols {
                        d[r * cols + j] = ys[j] * (gs[j] - inner);
                    }
                }
                vec![(*x, d)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).len();
                let gv = val(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, &inv) in rstd.iter().enumerate() {
                    let gs = &g[r * d..(r + 1) * d];
                    let hs = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gs[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hs[j];
                        dgain[j] += gs[j] * hs[j];
                        dbias[j] += gs[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gs[j] * gv[j];
                        dx[r * d + j] = inv * (dh - mean_dh - hs[j] * mean_dh_h);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, d));
                }
                out
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let d = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, d)
                    })
                    .collect()
            }
            Op::GatherRows { x, index } => {
                let cols = val(*x).cols();
                let mut d = vec![0.0; val(*x).len()];
                for (i, &src) in index.iter().enumerate() {
                    let target = &mut d[src * cols..(src + 1) * cols];
                    target
                        .iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                        .for_each(|(t, v)| *t += v);
                }
                vec![(*x, d)]
            }
            Op::SegmentMean { x, groups } => {
                let cols = val(*x).cols();
                let mut d = vec![0.0; val(*x).len()];
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    let gs = &g[gi * cols..(gi + 1) * cols];
                    for &r in members {
                        d[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(t, v)| *t += v * inv);
                    }
                }
                vec![(*x, d)]
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let inner = kernels::dot(ys, gs);
                    for j in 0..cols {
                        d[r * cols + j] = (gs[j] - ys[j] * inner) / n;
                    }
                }
                vec![(*x, d)]
            }
            Op::Gather { x, index } => {
                let mut d = vec![0.0; val(*x).len()];
                for (gv, &i) in g.iter().zip(index) {
                    d[i] += gv;
                }
                vec![(*x, d)]
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).cols();
                let width = node.value.cols();
                let mut d = vec![0.0; val(*x).len()];
                for r in 0..node.value.rows() {
                    d[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![(*x, d)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Digamma { x } => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| g * trigamma(v).expect("digamma input validated on forward"))
                    .collect();
                vec![(*x, d)]
            }
            Op::SmoothL1 { x, beta } => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| g * kernels::smooth_l1_grad(v, *beta))
                    .collect();
                vec![(*x, d)]
            }
            Op::BceWithLogits { x, targets } => {
                let n = targets.len() as f64;
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / n)
                    .collect();
                vec![(*x, d)]
            }
            Op::Diou1d { pred, gt } => {
                let p = val(*pred);
                let mut d = vec![0.0; p.len()];
                for (i, &seg) in gt.iter().enumerate() {
                    let (_, ds, de) = diou_terms(p.get(i, 0), p.get(i, 1), seg);
                    d[2 * i] = g[i] * ds;
                    d[2 * i + 1] = g[i] * de;
                }
                vec![(*pred, d)]
            }
        }
    }
}

/// DIoU of predicted `(s, e)` against ground truth and its partial derivatives
/// with respect to `s` and `e`. An inverted prediction counts as zero length.
pub(crate) fn diou_terms(s: f64, e: f64, gt: (f64, f64)) -> (f64, f64, f64) {
    let (a, b) = gt;
    let lg = b - a;
    let (lp, dlp_ds, dlp_de) = if e > s { (e - s, -1.0, 1.0) } else { (0.0, 0.0, 0.0) };

    let lo = s.max(a);
    let hi = e.min(b);
    let (inter, di_ds, di_de) = if hi > lo {
        (
            hi - lo,
            if s > a { -1.0 } else { 0.0 },
            if e < b { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0, 0.0)
    };

    let union = lp + lg - inter;
    let iou = inter / union;
    let du_ds = dlp_ds - di_ds;
    let du_de = dlp_de - di_de;
    let diou_ds = (di_ds * union - inter * du_ds) / (union * union);
    let diou_de = (di_de * union - inter * du_de) / (union * union);

    let gap = 0.5 * (s + e) - 0.5 * (a + b);
    let dist2 = gap * gap;
    let c = e.max(b) - s.min(a);
    let dc_ds = if s < a { -1.0 } else { 0.0 };
    let dc_de = if e > b { 1.0 } else { 0.0 };
    let c2 = c * c;
    let penalty = dist2 / c2;
    // d(gap²)/ds = d(gap²)/de = gap
    let dp_ds = gap / c2 - 2.0 * dist2 * dc_ds / (c2 * c);
    let dp_de = gap / c2 - 2.0 * dist2 * dc_de / (c2 * c);

    (iou - penalty, diou_ds - dp_ds, diou_de - dp_de)
}
