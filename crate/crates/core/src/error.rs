use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where in an input file a problem was found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowIssue {
    pub locator: String,
    pub message: String,
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.locator, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} invalid row(s); first: {}", .0.len(), .0[0])]
    Rejected(Vec<RowIssue>),

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("degenerate response scale [{min}, {max}]")]
    DegenerateScale { min: i64, max: i64 },

    #[error("response {value} outside scale [{min}, {max}]")]
    OutOfScale { value: i64, min: i64, max: i64 },

    #[error("unknown {kind} `{id}`")]
    UnknownKey { kind: &'static str, id: String },

    #[error("split: {0}")]
    Split(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("backend configuration: {0}")]
    Config(String),

    #[error("http: {0}")]
    Http(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
