use std::io;

use crate::types::MetricKind;

/// A grid cell with no samples: `(prompt_id, metric, timestep)`.
pub type Hole = (u64, MetricKind, u32);

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("value {value} out of range [0, 1] at line {line}")]
    Range { line: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("incomplete dataset: {} missing cell(s), first {:?}", holes.len(), holes.first())]
    IncompleteDataset { holes: Vec<Hole> },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for failures of the environment rather than of the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Image(image::ImageError::IoError(_)) => true,
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
