use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown channel `{0}`: no position supplied")]
    UnknownChannel(String),

    #[error("text not found in embedding store and no fallback seed: {0:?}")]
    MissingText(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("label `{0}` has no prototype in the bank")]
    MissingLabel(String),

    #[error("catalog has no entry for `{0}`")]
    MissingCatalog(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({what})")]
    Dim {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config [{section}] {msg}")]
    Config { section: String, msg: String },

    #[error("checkpoint version mismatch: file has v{found}, this build reads v{expected}")]
    Version { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
