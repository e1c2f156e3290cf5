//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested op.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value left the finite range or an optimization diverged.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint file failed to parse or validate.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
