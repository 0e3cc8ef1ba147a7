use thiserror::Error;

/// Errors produced by the simulator and defense pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("defense setup error: {0}")]
    DefenseSetup(String),

    #[error("inspection unavailable: {0}")]
    InspectionUnavailable(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("manifest error in `{field}`: {message}")]
    Manifest { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
