use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The light direction no longer points toward the screen (`<l, s> >= 0`).
    #[error("constraint {index}: light does not face the screen (<l, s> = {dot})")]
    ConstraintViolation { index: usize, dot: f64 },

    #[error("failed to decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("image {path} has no shadow pixels below threshold {threshold}")]
    EmptyShadow { path: PathBuf, threshold: f64 },

    #[error("image is {width}x{height}, minimum is 8x8")]
    ImageTooSmall { width: usize, height: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("batch contains no rays with surviving samples")]
    EmptyBatch,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("mesh: {0}")]
    Mesh(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
