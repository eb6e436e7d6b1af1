use std::path::PathBuf;

use crate::io::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error(
        "rotation is not orthonormal with det +1 (max |RᵀR - I| = {deviation:e}, det = {det})"
    )]
    NotOrthonormal { deviation: f64, det: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("shape mismatch: expected {expected:?} (h, w), got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("view has no finite-depth pixels")]
    NoFiniteDepth,

    #[error("point map has no valid pixels")]
    EmptyPointMap,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid condition map: {0}")]
    InvalidCondition(String),

    #[error("supervision view camera does not match the target camera")]
    CameraMismatch,

    #[error("mask library is empty")]
    EmptyMaskLibrary,

    #[error("sparse reference has an empty valid set")]
    EmptyValidSet,

    #[error("no SSIM window reaches the valid-weight threshold")]
    NoSsimWindows,

    #[error("bin edges must be strictly increasing: {0:?}")]
    NonMonotoneBins(Vec<f64>),

    #[error("no records to aggregate")]
    NoRecords,

    #[error("training batch is empty")]
    EmptyBatch,

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
