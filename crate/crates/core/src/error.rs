use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("ingestion error at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },

    #[error("label error: unknown label `{0}`")]
    Label(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("degenerate output: {0}")]
    Degenerate(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Schema(_) | Error::Ingestion { .. } | Error::Label(_) | Error::Precondition(_) | Error::Shape(_)
        )
    }
}
