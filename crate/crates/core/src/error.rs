use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate posterior at position {position}: {reason}")]
    DegenerateState { position: usize, reason: String },

    #[error("model produced non-finite output: {0}")]
    Model(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("checkpoint mismatch on field `{field}`: {reason}")]
    Mismatch { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Mismatch { .. } => 1,
            Error::InvalidInput(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 2,
            Error::DegenerateState { .. } | Error::Model(_) | Error::Training(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
