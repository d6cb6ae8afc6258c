use thiserror::Error;

pub type Result<T, E = MorfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MorfError {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MorfError {
    pub(crate) fn numeric(what: impl Into<String>) -> Self {
        MorfError::Numeric(what.into())
    }
}
