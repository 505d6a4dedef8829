use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{transform}: magnitude {value} outside [{lo}, {hi}]")]
    MagnitudeOutOfRange {
        transform: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("image must be square for 90-degree rotation, got {height}x{width}")]
    NonSquare { height: usize, width: usize },

    #[error("zero vector passed to {0}")]
    ZeroVector(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("class {class} has {have} samples, need {need}")]
    InsufficientClass { class: usize, have: usize, need: usize },

    #[error("training diverged at step {0}: loss is not finite")]
    Diverged(usize),

    #[error("degenerate probe set: {0}")]
    DegenerateProbe(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
