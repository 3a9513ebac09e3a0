use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting engine.
#[derive(Debug, Error)]
pub enum StumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at frame {frame}, node {node}, channel {channel}")]
    NonFiniteValue { frame: usize, node: usize, channel: usize },
    #[error("series too short: {frames} frames, need at least {required}")]
    SeriesTooShort { frames: usize, required: usize },
    #[error("graph convolution backbone requires an adjacency graph")]
    MissingGraph,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("empty observation set for {0}")]
    EmptyObservationSet(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StumError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        StumError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StumError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = StumError> = std::result::Result<T, E>;
