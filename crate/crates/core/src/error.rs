use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, WfcError>;

#[derive(Debug, Error)]
pub enum WfcError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("invalid layer selector: {0}")]
    InvalidSelector(String),

    #[error("group {0} has no rows")]
    UndefinedGroup(usize),

    #[error("stratum (y={class}, a={group}) has no rows")]
    UndefinedStratum { class: usize, group: usize },

    #[error("class {0} is absent from the true labels")]
    UndefinedClass(usize),

    #[error("operation supports exactly 2 groups, got {0}")]
    UnsupportedGroupArity(usize),

    #[error("dataset has no sensitive attribute column")]
    MissingAttribute,

    #[error("dataset has no label column")]
    MissingLabels,

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WfcError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        WfcError::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        WfcError::Shape(msg.into())
    }

    pub(crate) fn dist(msg: impl Into<String>) -> Self {
        WfcError::Distribution(msg.into())
    }
}
