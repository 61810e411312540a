use thiserror::Error;

/// Errors raised anywhere in the model pipeline.
#[derive(Debug, Error)]
pub enum DsppError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("attention set is empty")]
    DegenerateAttention,

    #[error("{what} id {id} out of range (count {count})")]
    OutOfRange {
        what: &'static str,
        id: usize,
        count: usize,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("input is not chronologically sorted at position {0}")]
    Unsorted(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unstable Hawkes specification: spectral radius {0:.4} >= 1")]
    UnstableSpec(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DsppError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> DsppError {
    DsppError::Dimension {
        op,
        detail: detail.into(),
    }
}
