//! Dense row-major `f64` tensors, the raw kernels behind them, and a
//! tape-based reverse-mode differentiator ([`Tape`]).
//!
//! Everything in the model is at most two-dimensional. One-dimensional
//! tensors behave as a single row wherever a row-wise operation is applied.

mod kernels;
pub mod special;
mod tape;

pub use special::{digamma, trigamma};
pub use tape::{Gradients, OpKind, Tape, Var};
pub(crate) use tape::diou_terms;
pub use kernels::{sigmoid, smooth_l1, softplus};

use crate::error::TensorError;

/// Norm below which cosine similarity and row normalisation refuse to divide.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension {
                op: "Tensor::new",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Dimension {
                op: "Tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows under the row-wise view (1 for scalars and vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Width of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.shape.len() != 2 {
        return Err(TensorError::Dimension {
            op,
            detail: format!("expected a matrix, got shape {:?}", t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul",
            detail: format!("inner dimensions {k} and {k2} differ"),
        });
    }
    Tensor::new(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite {
            op: "softmax_rows",
            node: 0,
        });
    }
    let mut out = x.clone();
    kernels::softmax_rows_inplace(&mut out.data, x.cols());
    Ok(out)
}

/// Per-row layer normalisation followed by the affine `gain`, `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    let d = x.cols();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            detail: format!("width {d}, gain {}, bias {}", gain.len(), bias.len()),
        });
    }
    let (y, _, _) = kernels::layer_norm(&x.data, &gain.data, &bias.data, d, eps);
    Tensor::new(x.shape.clone(), y)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, TensorError> {
    if u.len() != v.len() {
        return Err(TensorError::Dimension {
            op: "cosine_similarity",
            detail: format!("{} vs {}", u.len(), v.len()),
        });
    }
    let nu = kernels::norm(u);
    let nv = kernels::norm(v);
    for n in [nu, nv] {
        if n <= NORM_FLOOR {
            return Err(TensorError::DegenerateVector {
                op: "cosine_similarity",
                norm: n,
            });
        }
    }
    Ok((kernels::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
