use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown label id {id:?} (not in class catalog)")]
    UnknownLabel { id: String },

    #[error("class catalog error: {0}")]
    Catalog(String),

    #[error("trace invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("nothing to merge: both traces are empty")]
    NothingToMerge,

    #[error("batch has no {0} proxy-sample pairs")]
    NoProxyPairs(&'static str),

    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a failed computation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownLabel { .. }
                | Error::Catalog(_)
                | Error::Invariant(_)
                | Error::Shape { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Checkpoint(_)
        )
    }
}
