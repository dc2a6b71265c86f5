//! Minimal reverse-mode differentiation: the tensor type, a tape-style
//! computation graph with exactly the operations the network and losses
//! need, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_masked, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Graph, Node, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Norms at or below this are rejected by normalization.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("cannot normalize vector with norm {norm:e}")]
    DegenerateNorm { norm: f64 },
    #[error("index {index} out of range for {bound} classes")]
    Index { index: usize, bound: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}

/// `a · b` for matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    a.matmul(b)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `x / ||x||`, rejecting norms at or below [`NORM_EPSILON`].
pub fn l2_normalize(x: &Tensor) -> Result<Tensor, NumericsError> {
    let n = x.norm();
    if !(n > NORM_EPSILON) {
        return Err(NumericsError::DegenerateNorm { norm: n });
    }
    Ok(x.map(|v| v / n))
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean over rows of `-log softmax(logits)[target]` (0-based targets).
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = g.softmax_cross_entropy(l, targets)?;
    Ok(g.scalar(loss))
}
