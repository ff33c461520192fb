use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),

    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("mask is empty, nothing to edit")]
    EmptyMask,

    #[error("edit mask left the frame at frame {frame}")]
    MaskLeftFrame { frame: usize },

    #[error("regions {0} and {1} overlap after dilation")]
    OverlappingRegions(usize, usize),

    #[error("timestep {t} outside schedule [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss weight is zero")]
    ZeroWeight,

    #[error("non-finite loss at iteration {iteration} in stage {stage}")]
    NonFiniteLoss { stage: String, iteration: usize },

    #[error("missing weights: {0}")]
    MissingWeights(String),

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("stream gap: expected frame {expected}, got {got}")]
    StreamGap { expected: usize, got: usize },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
