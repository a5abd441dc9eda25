use thiserror::Error;

/// Errors raised by the fusion library.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("dense oracle refused: dimension {dim} exceeds cap {cap}")]
    OracleCap { dim: usize, cap: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FusionError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FusionError::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FusionError::Parameter(msg.into()))
}
