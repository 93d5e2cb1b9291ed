//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; each operation records its inputs, and
//! [`Tape::backward`] sweeps the tape once in reverse, accumulating gradients
//! into the [`ParamStore`]. Everything is rank 2 (row-major matrices); a
//! scalar is `1×1`. Broadcasting exists only for adding or multiplying a
//! single row into every row.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, softmax_rows, Axis, Tape, Var};
pub use tensor::{Mask, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("every entry of row {0} is masked")]
    AllMaskedRow(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
