//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; numerical routines validate
//! inputs up front and reject them instead of propagating NaNs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("gradient is zero; update direction is undefined")]
    ZeroGradient,

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("conjugate gradient did not reach tolerance after {iterations} iterations (residual {residual:.3e})")]
    CgDidNotConverge { iterations: usize, residual: f64 },

    #[error("checkpoint version mismatch: file has version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config schema error: {0}")]
    Schema(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("non-finite loss at update {update}; diagnostics written to {dump}")]
    NonFiniteLoss { update: usize, dump: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable class name, used by the CLI when reporting failures.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::RejectedInput(_) => "rejected-input",
            Error::ZeroGradient => "zero-gradient",
            Error::NotPositiveDefinite => "not-positive-definite",
            Error::CgDidNotConverge { .. } => "cg-did-not-converge",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::Schema(_) => "schema",
            Error::MissingInput(_) => "missing-input",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Rejects non-finite entries; `what` names the argument in the error.
pub fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::RejectedInput(format!(
            "{what}[{i}] is not finite (got {v})"
        )));
    }
    Ok(())
}

/// Rejects a non-finite scalar; `what` names the argument in the error.
pub fn check_finite_scalar(value: f64, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::RejectedInput(format!(
            "{what} is not finite (got {value})"
        )));
    }
    Ok(())
}
