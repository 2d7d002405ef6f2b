use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("root bracketing failed: {0}")]
    Bracket(String),

    #[error("no convergence at lambda={lambda} on the {branch} branch (residual {residual:e}, {iterations} iterations)")]
    NoConvergence {
        lambda: f64,
        branch: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("fixed point not reached after {iterations} iterations (last relative change {residual:e})")]
    FixedPoint { iterations: usize, residual: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
