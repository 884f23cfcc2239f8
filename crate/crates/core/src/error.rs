use alloc::string::String;

/// Errors raised by the numeric core.
///
/// Variants map onto the CLI exit-code categories: shape and precondition
/// problems are validation failures, non-finite values are numeric failures.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("not enough neighbors: requested k={k} but only {available} available")]
    NotEnoughNeighbors { k: usize, available: usize },

    #[error("score table does not match dataset (expected fingerprint {expected:016x}, got {got:016x})")]
    StaleScores { expected: u64, got: u64 },

    #[error("model not trained: {0}")]
    Untrained(&'static str),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { expected: expected.into(), got: got.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = core::result::Result<T, Error>;

/// Returns the index of the first non-finite value, if any.
pub(crate) fn first_non_finite(values: &[f32]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

pub(crate) fn ensure_finite(values: &[f32], context: &'static str) -> Result<()> {
    match first_non_finite(values) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}
