use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown dataset format `{0}` (expected `ucr_tsv` or `uea_ts`)")]
    UnknownFormat(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cluster {cluster} is empty")]
    EmptyCluster { cluster: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: String, message: String },
}

impl Error {
    /// Stable machine-readable code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "E_PARSE",
            Error::Io { .. } => "E_IO",
            Error::UnknownFormat(_) => "E_FORMAT",
            Error::InvalidDataset(_) => "E_DATASET",
            Error::Config(_) => "E_CONFIG",
            Error::Contract(_) => "E_CONTRACT",
            Error::EmptyCluster { .. } => "E_EMPTY_CLUSTER",
            Error::NonFinite { .. } => "E_NON_FINITE",
            Error::Artifact { .. } => "E_ARTIFACT",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
