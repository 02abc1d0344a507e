use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition (shapes, symmetry, ranges).
    #[error("validation error: {0}")]
    Validation(String),
    /// An iterative solver ran out of budget before meeting its tolerance.
    #[error("no convergence after {iterations} iterations (residual norms {residuals:?})")]
    NonConvergence { iterations: usize, residuals: Vec<f64> },
    /// A computation produced a value outside its mathematical domain.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::Validation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
