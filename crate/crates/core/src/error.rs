use thiserror::Error;

/// Errors raised by the aggregation laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbitError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),

    /// A quantization or privacy setting cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called outside its admissible domain.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, ProbitError>;

impl From<std::io::Error> for ProbitError {
    fn from(e: std::io::Error) -> Self {
        ProbitError::Io(e.to_string())
    }
}
