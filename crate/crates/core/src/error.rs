use std::io;

/// Errors raised by the registration toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid grid at step {step}: {reason}")]
    InvalidGrid { step: usize, reason: String },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("grid extension violates the volume floor at step {step}")]
    InfeasibleExtension { step: usize },

    #[error("ill-conditioned least-squares problem: {0}")]
    IllConditioned(String),

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
