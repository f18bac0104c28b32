use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    WindowTooLarge { width: usize, height: usize, window: usize },

    #[error("mask has no valid pixels")]
    EmptyMask,

    #[error("initialization produced no gaussians: {0}")]
    Initialization(String),

    #[error("noise schedule error: {0}")]
    Schedule(String),

    #[error("missing refined image for pseudo camera `{0}`")]
    MissingRefined(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("malformed header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("invalid payload in {path}: {reason}")]
    Payload { path: PathBuf, reason: String },

    #[error("ply: {0}")]
    Ply(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png error in {path}: {reason}")]
    Png { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
