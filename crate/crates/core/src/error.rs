use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate rotation: quaternion norm {0:e} is below 1e-12")]
    DegenerateRotation(f64),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("scene layout over-constrained: {0}")]
    Overconstrained(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
