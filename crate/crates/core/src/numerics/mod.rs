//! Dense `f64` arrays and a small reverse-mode autodiff tape.
//!
//! Only the ops the trainer needs are provided: matmul, bias add, elementwise
//! add/mul/scale, ReLU, sum/mean, per-row l1 norm, per-row log-sum-exp and the
//! two fused softmax losses. There is no general broadcasting.

mod gradcheck;
mod random;
mod tape;
mod tensor;

pub use gradcheck::{
    central_difference, op_suite, relative_error, run_case, GradCheckCase, GradCheckReport,
    REL_ERR_FLOOR,
};
pub use random::gaussian_vec;
pub use tape::{sign0, Gradients, Tape, Var};
pub use tensor::{logsumexp, logsumexp_slice, matmul, softmax_rows, Axis, DenseTensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    UnknownNode,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}
