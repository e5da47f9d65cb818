//! Dense n-dimensional arrays with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major `f64` buffer plus a shape. Differentiable
//! computations are recorded on a [`Tape`] that is rebuilt for every forward
//! pass; [`Tape::backward`] replays the recorded operations in reverse and
//! accumulates gradients into every node that requires them. All arithmetic
//! is double precision.

mod check;
mod ops;
mod params;
mod tape;

pub use check::{grad_check, grad_check_params, grad_check_params_refined, grad_check_refined};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{Bindings, GradSink, Tape, TapeOp, Values, Var};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an empty tape (no forward pass recorded)")]
    EmptyTape,
    #[error("variable #{index} does not belong to this tape (len {len})")]
    ForeignVar { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape("from_vec", shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {numel} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape("zeros", shape).expect("valid shape");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Rank-1 tensor of length 1.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }
}

pub(crate) fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}
