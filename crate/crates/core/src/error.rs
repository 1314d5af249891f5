use thiserror::Error;

/// Errors raised by tensor math, layers, models and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("zero-norm input to {op}")]
    ZeroNorm { op: &'static str },
    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:e})")]
    SvdNoConvergence { sweeps: usize, off_diagonal: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds context {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("backward called without retained forward caches")]
    MissingCaches,
    #[error("cache does not match layer: {0}")]
    CacheMismatch(String),
    #[error("corpus too small: {len} bytes, need at least {required}")]
    CorpusTooSmall { len: usize, required: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
