use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// Inputs are malformed (shape mismatch, non-finite values, bad labels).
    #[error("invalid input: {0}")]
    Input(String),
    /// An optimizer stopped without meeting its tolerance. Carries the loss trace.
    #[error("did not converge: {reason}")]
    Convergence { reason: String, trace: Vec<f64> },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

/// Failure of an iterative solver.
///
/// `NotConverged` still hands back the best state reached so callers can
/// write partial results.
#[derive(Debug, Error)]
pub enum SolveError<T: fmt::Debug> {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("did not converge: {reason}")]
    NotConverged { reason: String, partial: Box<T> },
}

/// Solver outputs that carry a scalar objective trace.
pub trait Traced {
    fn objective_trace(&self) -> Vec<f64>;
}

impl<T: fmt::Debug + Traced> From<SolveError<T>> for Error {
    fn from(err: SolveError<T>) -> Self {
        match err {
            SolveError::Invalid(e) => e,
            SolveError::NotConverged { reason, partial } => Error::Convergence {
                reason,
                trace: partial.objective_trace(),
            },
        }
    }
}
