//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs that violate a precondition (non-finite values, bad ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix is not positive definite: {0}")]
    NotSpd(String),

    /// Structural validation of data files or containers failed.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file could not be parsed; carries location diagnostics.
    #[error("parse error in {path}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Parse {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    /// Cholesky factorization failed even after jitter escalation.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    /// Least-squares tensor estimation failed (rank-deficient design).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// A numerical quantity became non-finite during sampling.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Posterior archive does not match the data it is applied to.
    #[error("provenance error: {0}")]
    Provenance(String),

    /// The operation was invoked in a way that cannot be satisfied.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
