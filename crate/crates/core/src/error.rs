use thiserror::Error;

/// Errors raised by tensor operations, geometry, and the model pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("slice index {index} out of range 1..={count}")]
    SliceIndex { index: usize, count: usize },

    #[error("degenerate batch: {0}")]
    Degenerate(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    Placement { attempts: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
