use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode {path}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("image too small: {pixels} pixels for {n_target} superpixels")]
    ImageTooSmall { pixels: usize, n_target: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("eigensolver failed: {0}")]
    NumericalFailure(String),

    #[error("eigenvalue {value:e} at index {index} is not safely invertible")]
    SingularEigenvalue { index: usize, value: f64 },

    #[error("seed vector is empty (all zero)")]
    EmptySeed,

    #[error("seed vector has a negative or non-finite entry at node {0}")]
    InvalidSeed(usize),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("column layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("no foreground nodes to select seeds from")]
    EmptyForeground,

    #[error("ground-truth mask for {0} has no foreground")]
    EmptyGroundTruth(String),

    #[error("feature file missing for sample {0}")]
    FeatureMissing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn decode(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Decode {
            path: path.into(),
            source,
        }
    }
}
