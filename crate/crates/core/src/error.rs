use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("palette grid mismatch: expected {expected_a}x{expected_b}, got {got_a}x{got_b}")]
    GridMismatch {
        expected_a: usize,
        expected_b: usize,
        got_a: usize,
        got_b: usize,
    },

    #[error("input of {height}x{width} must be padded to a multiple of {multiple} (pad by {pad_h} rows and {pad_w} columns)")]
    Padding {
        height: usize,
        width: usize,
        multiple: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
