//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by registration, preprocessing, evaluation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied data failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two inputs that must share a grid do not.
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    /// A quantity became degenerate (e.g. a normalization over identical data).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The optimizer or an objective evaluation failed numerically.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file did not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 for input/format problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
