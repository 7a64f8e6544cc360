use thiserror::Error;

/// Error type shared across the crate.
///
/// `Invalid`, `Shape`, `Format`, and `Io` describe bad inputs or bad data
/// files; `Solver` describes numerical failures (diverged iteration, model
/// collapse). Front ends map the two groups to distinct exit codes.
#[derive(Debug, Error)]
pub enum RcaError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("solver failure: {0}")]
    Solver(String),
}

impl RcaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        RcaError::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        RcaError::Shape(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        RcaError::Format(msg.into())
    }

    pub fn solver(msg: impl Into<String>) -> Self {
        RcaError::Solver(msg.into())
    }

    /// True for errors caused by bad data rather than numerical failure.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, RcaError::Solver(_))
    }
}

pub type RcaResult<T> = Result<T, RcaError>;
