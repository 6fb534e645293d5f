use alloc::string::String;
use alloc::vec::Vec;

/// Errors surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite loss at diffusion step {step} (batch item {batch_index})")]
    NonFiniteLoss { step: usize, batch_index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cholesky factorization failed (jitter escalated to {jitter:e})")]
    Factorization { jitter: f64 },
    #[error("training diverged at epoch {epoch}: loss {loss} exceeded 10x initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("every point of the search grid has already been evaluated")]
    GridExhausted,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
