use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Core(#[from] bitloc_core::Error),
    #[error(transparent)]
    Net(#[from] bitloc_net::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Network error with file-system failures attributed to `path`.
    pub(crate) fn net_at(path: impl Into<PathBuf>, e: bitloc_net::Error) -> Self {
        match e {
            bitloc_net::Error::Io(source) => Error::io(path, source),
            other => Error::Net(other),
        }
    }

    /// True for errors caused by the caller's input rather than by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Core(bitloc_core::Error::InvalidArgument(_)) | Error::Core(bitloc_core::Error::Parse { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
