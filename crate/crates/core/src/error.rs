use std::path::PathBuf;

use thiserror::Error;

use crate::ids::IdsError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("decomposition table has no valid entries")]
    EmptyTable,

    #[error("charset contains no CJK character, radical bank would be empty")]
    EmptyBank,

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite loss{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { step: Option<u64> },

    #[error("empty input")]
    EmptyInput,

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Ids(#[from] IdsError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn unreadable(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::FileUnreadable {
            path: path.into(),
            source,
        }
    }
}
