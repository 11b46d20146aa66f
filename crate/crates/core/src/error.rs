use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid stride {0}; must be at least 1")]
    InvalidStride(usize),

    #[error("pooling window {window} does not fit input {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("label row {row} sums to {sum}, expected 1")]
    LabelNotNormalized { row: usize, sum: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cannot keep {n_keep} filters: the per-layer floor needs at least {floor}")]
    KeepBelowFloor { n_keep: usize, floor: usize },

    #[error("invalid keep ratio {0}; must lie in (0, 1]")]
    InvalidKeepRatio(f64),

    #[error("keep-ratio schedule is not strictly increasing: {0:?}")]
    NonIncreasingSchedule(Vec<f64>),

    #[error("missing saved context for slot {slot}")]
    MissingContext { slot: usize },

    #[error("architecture line {line}: {msg}")]
    ArchParse { line: usize, msg: String },

    #[error("architecture does not chain at layer {layer}: {msg}")]
    ArchChain { layer: usize, msg: String },

    #[error("unsupported for training: {0}")]
    Unsupported(String),

    #[error("zero denominator in compression report ({0})")]
    ZeroDenominator(&'static str),

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("invalid stage transition from {from} to {to}")]
    StageTransition { from: String, to: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line tool: 1 validation, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::InvalidKeepRatio(_)
            | Error::NonIncreasingSchedule(_)
            | Error::ArchParse { .. }
            | Error::ArchChain { .. }
            | Error::KeepBelowFloor { .. }
            | Error::Unsupported(_) => 1,
            Error::Data { .. }
            | Error::Checkpoint(_)
            | Error::CheckpointVersion { .. }
            | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
