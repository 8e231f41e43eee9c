use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition: bad shapes, empty inputs, out-of-range config.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity showed up in a forward value.
    #[error("numeric fault at node {node} ({op}): {detail}")]
    Numeric {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("training fault in {stage}: {detail}")]
    Training { stage: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    /// Prefixes the message with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Training { .. } => self,
            Error::Contract(msg) => Error::Contract(format!("[{stage}] {msg}")),
            Error::Format(msg) => Error::Format(format!("[{stage}] {msg}")),
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
