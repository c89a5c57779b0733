use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot ingest image {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{height}x{width} is not divisible by stride {stride}; pad by ({pad_rows}, {pad_cols}) first")]
    NotDivisible {
        height: usize,
        width: usize,
        stride: usize,
        pad_rows: usize,
        pad_cols: usize,
    },

    #[error("sampling plan misuse: {0}")]
    Plan(String),

    #[error("patch {patch}x{patch} does not fit in {height}x{width} image")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("input {height}x{width} is below the network minimum of {min}x{min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("blind-spot audit failed at pixel ({row}, {col}) channel {channel} with delta {delta}: output moved by {deviation}")]
    AuditFailed {
        row: usize,
        col: usize,
        channel: usize,
        delta: f64,
        deviation: f64,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
