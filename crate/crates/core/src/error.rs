use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("calibration failure: {0}")]
    Calibration(String),
    #[error("missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("stale input {}: {reason}", path.display())]
    StaleInput { path: PathBuf, reason: String },
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
