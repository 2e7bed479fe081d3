use thiserror::Error;

/// Errors raised by estimation, fitting and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {time} is outside (0, {horizon}]")]
    TimeOutOfRange { time: f64, horizon: f64 },

    #[error("invalid hazard tensor: {0}")]
    InvalidHazards(String),

    #[error("invalid target specification: {0}")]
    InvalidTarget(String),

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("norm matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("already converged: masked score is zero")]
    ZeroScore,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
