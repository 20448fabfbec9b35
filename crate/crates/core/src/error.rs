use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {0} is outside the label set {{0, 1, 2, 4}}")]
    InvalidLabel(u8),

    #[error("channel {channel} has degenerate statistics: {reason}")]
    DegenerateChannel {
        channel: usize,
        reason: &'static str,
    },

    #[error("spatial size {size:?} is not divisible by {multiple} (2^depth)")]
    NotDivisible { size: [usize; 3], multiple: usize },

    #[error("volume {size:?} is smaller than the minimum {minimum} voxels per axis")]
    TooSmall { size: [usize; 3], minimum: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset requested")]
    EmptyDataset,

    #[error("non-finite loss at fold {fold}, epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        fold: usize,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
