//! Dense-tensor core with reverse-mode automatic differentiation.
//!
//! Everything trainable in the pipeline is built on this module: a row-major
//! [`Tensor`], a single-threaded [`Tape`] that records forward operations and
//! replays them backward, a named [`ParamStore`], the [`Adam`] optimizer, and
//! a finite-difference [`grad_check`] harness (f64 verification mode).

mod gradcheck;
pub mod init;
mod nn_ops;
mod optim;
mod params;
#[cfg(test)]
mod primitive_checks;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};

use thiserror::Error;

/// Errors raised by tensor operations and the tape.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("backward: tape already consumed")]
    TapeConsumed,
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("parameter name already registered: {0}")]
    DuplicateParam(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
    #[error("optimizer state not initialized for current parameters")]
    UninitializedOptimizer,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_error(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

fn arg_error(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
