//! Minimal dense tensors with tape-based reverse-mode differentiation.

mod conv;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_coords, relative_error, GradCheckReport, REL_FLOOR};
pub use params::{AdamConfig, BoundParams, Checkpoint, Param, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;
