use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {what} = {index}, bound {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
