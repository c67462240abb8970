use thiserror::Error;

/// Errors produced by the prototype-explanation library.
#[derive(Debug, Error)]
pub enum ProdgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProdgError>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> ProdgError {
    ProdgError::InvalidArgument(msg.into())
}
