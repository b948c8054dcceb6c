//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] borrows a [`ParamStore`], records each primitive with its value
//! during the forward pass, and replays the records in reverse on
//! [`Tape::backward`]. Shapes are validated when a node is recorded, so a
//! malformed graph fails before any gradient is computed. Apart from the
//! bias in [`Tape::affine`], nothing broadcasts.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{log_sum_exp, softmax, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("usage error: {0}")]
    Usage(&'static str),
}
