use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a volume or checkpoint file could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i64),
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: dimension mismatch ({detail})")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("{op}: output spatial dims would be {dims:?}; every dim must be >= 1")]
    OutputUnderflow { op: &'static str, dims: [i64; 3] },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown layer {name:?}; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },
    #[error("architecture shape underflow at {stage}: input {input:?} cannot be reduced further")]
    StageUnderflow { stage: String, input: [usize; 3] },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch} (loss {loss}); parameters restored from {restored}")]
    Diverged {
        epoch: usize,
        loss: f64,
        restored: String,
    },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("{0}")]
    Config(String),
    #[error("manifest not found: {}", .0.display())]
    ManifestNotFound(PathBuf),
    #[error("no samples: {0}")]
    NoSamples(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }
}
