use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: cannot operate over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid graph state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("degenerate calibration vector: entry {index} is {value:e}")]
    DegenerateCalibration { index: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data at byte offset {offset}: {detail}")]
    Corruption { offset: u64, detail: String },

    #[error("I/O error on {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
