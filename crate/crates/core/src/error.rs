use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{op} over an empty extent")]
    EmptyReduction { op: &'static str },

    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable belongs to tape {found}, expected tape {expected}")]
    ForeignVariable { expected: u64, found: u64 },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not recorded on the tape (constant or detached)")]
    LossNotOnTape,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("architecture `{name}` failed shape propagation at {location}: {reason}")]
    ShapePropagation {
        name: String,
        location: String,
        reason: String,
    },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("{path}: corrupt file at byte offset {offset}: {reason}")]
    CorruptFile {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("pipeline stage {stage} failed: {reason}")]
    Stage { stage: usize, reason: String },

    #[error("pipeline stage {stage} panicked")]
    StagePanicked { stage: usize },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("{0}")]
    Format(String),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Data,
    Runtime,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Validation(_)
            | Error::UnknownPreset(_)
            | Error::Partition(_)
            | Error::InvalidArgument(_)
            | Error::ShapePropagation { .. } => ErrorCategory::Validation,
            Error::CorruptFile { .. }
            | Error::BadMagic { .. }
            | Error::Io { .. }
            | Error::EmptyDataset
            | Error::LabelOutOfRange { .. } => ErrorCategory::Data,
            _ => ErrorCategory::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
