use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pool must contain at least one sample")]
    EmptyPool,

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("label `{0}` is not in the task label set")]
    UnknownLabel(String),

    #[error("sample `{0}` has no bias score")]
    MissingScore(String),

    #[error("sample `{0}` has no bias indicator")]
    MissingIndicator(String),

    #[error("requested {requested} samples but the pool holds {available}")]
    CountExceedsPool { requested: usize, available: usize },

    #[error("n_bi = {n_bi} exceeds pool size {pool}")]
    TooManyGroups { n_bi: usize, pool: usize },

    #[error("backend `{backend}` lacks capability: {missing}")]
    Capability { backend: String, missing: String },

    #[error("backend `{0}` has not been trained")]
    NotTrained(String),

    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dataset `{name}`: {reason}")]
    Dataset { name: String, reason: String },

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
