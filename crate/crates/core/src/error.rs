use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("dense assembly refused: dimension {dim} exceeds dense limit {limit}")]
    DenseLimit { dim: usize, limit: usize },

    #[error("solver did not converge: {0}")]
    NotConverged(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    /// Prefix the message with the hyperparameter component it concerns.
    pub fn for_component(self, j: usize) -> Self {
        match self {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("component {j}: {m}")),
            Error::NumericalFailure(m) => Error::NumericalFailure(format!("component {j}: {m}")),
            Error::NotConverged(m) => Error::NotConverged(format!("component {j}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
