use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("ingestion error at row {row}, column {column}: {detail}")]
    Ingestion {
        row: usize,
        column: String,
        detail: String,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("label scarcity error: {0}")]
    Scarcity(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("head error: {0}")]
    Head(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed message {path:?}: {detail}")]
    Format { path: Option<PathBuf>, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
