use thiserror::Error;

#[derive(Debug, Error)]
pub enum BunchingError {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed or inconsistent data (files, samples, histograms).
    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular matrix in {context} (condition estimate {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error("solver did not converge after {iterations} iterations (gradient sup-norm {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BunchingError {
    /// True for failures caused by the input data rather than by the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            BunchingError::Data(_)
                | BunchingError::InvalidInput(_)
                | BunchingError::Io(_)
                | BunchingError::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BunchingError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(BunchingError::Domain(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(BunchingError::InvalidInput(msg.into()))
}
