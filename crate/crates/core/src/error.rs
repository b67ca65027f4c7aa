//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model fitting, portfolio construction and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument or configuration value is invalid.
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical procedure failed (factorization, optimization, solve).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Cholesky factorization failed even after escalating the jitter.
    #[error("Cholesky factorization failed; attempted jitter ladder {attempted:?}")]
    CholeskyFailed {
        /// Diagonal loadings tried, in order, before giving up.
        attempted: Vec<f64>,
    },

    /// An object was used in a state that does not support the operation.
    #[error("invalid state: {0}")]
    State(String),

    /// Underlying file-system failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed panel data (delimited text input).
    #[error(transparent)]
    Panel(#[from] crate::data_io::PanelError),

    /// Malformed model or report document.
    #[error("document error: {0}")]
    Document(String),
}
