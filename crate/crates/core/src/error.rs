use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0} requires a non-empty input")]
    EmptyInput(&'static str),

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid conversation {id}: {reason}")]
    InvalidConversation { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unsupported format version {found} in {what} (expected {expected})")]
    FormatVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid_conv(id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConversation {
            id: id.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed input data rather than usage or runtime failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConversation { .. }
                | Error::Parse { .. }
                | Error::FormatVersion { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
