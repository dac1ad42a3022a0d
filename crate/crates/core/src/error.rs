use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no annotations")]
    NoAnnotations,

    #[error("point ({row}, {col}) lies outside a {height}x{width} raster")]
    PointOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("duplicate annotation at ({row}, {col})")]
    DuplicatePoint { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid label code {0}")]
    InvalidLabelCode(u8),

    #[error("payload size mismatch: header declares {expected} values, found {actual}")]
    PayloadSizeMismatch { expected: usize, actual: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("too many instances for a 16-bit label map: {0}")]
    TooManyInstances(usize),

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("no supervision: labels contain no instances")]
    NoSupervision,

    #[error("no labeled pixels")]
    NoLabeledPixels,

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("scene too crowded: placed {placed} of {requested} nuclei")]
    SceneTooCrowded { placed: usize, requested: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed point file {path}: {message}")]
    MalformedPoints { path: PathBuf, message: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence(_))
    }
}
