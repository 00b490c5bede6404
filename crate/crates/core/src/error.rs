use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
    #[error("point lies behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("ray does not intersect the voxel grid")]
    RayMissesGrid,
    #[error("voxel index {index} out of range (grid has {len} voxels)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward pass requested without a cached forward pass")]
    MissingForwardCache,
    #[error("gradient tape does not match the batch: {0}")]
    TapeMismatch(String),
    #[error("ground truth depth is not finite")]
    InvalidGroundTruth,
    #[error("not enough ground truth: {0}")]
    InsufficientGroundTruth(String),
    #[error("training diverged at step {step}: risk is not finite")]
    DivergenceDetected { step: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("degenerate synthetic scene: {0}")]
    DegenerateScene(String),
    #[error("{voxels} voxels is too many for exhaustive enumeration (limit {limit})")]
    TooLargeForEnumeration { voxels: usize, limit: usize },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
