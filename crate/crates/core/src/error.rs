use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass; clear it first")]
    StaleTape,

    #[error("series too short: length {len}, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("k_top = {k} out of range 1..={max}")]
    KTopOutOfRange { k: usize, max: usize },

    #[error("field `{field}`: category index {index} out of range (cardinality {cardinality})")]
    CategoryOutOfRange {
        field: String,
        index: usize,
        cardinality: usize,
    },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("need >=2 per class: n = {n} is too small (minimum {min})")]
    TooFewSamples { n: usize, min: usize },

    #[error("volume {dims:?} too small for {blocks} dense blocks")]
    VolumeTooSmall { dims: [usize; 3], blocks: usize },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("sample `{id}`: dimension mismatch: {detail}")]
    DimMismatch { id: String, detail: String },

    #[error("sample `{id}`: unknown label {label}")]
    UnknownLabel { id: String, label: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint checksum mismatch: header {expected}, payload {actual}")]
    Checksum { expected: String, actual: String },

    #[error("incompatible checkpoint and dataset: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn format(what: &'static str, detail: impl ToString) -> Self {
        Error::Format {
            what,
            detail: detail.to_string(),
        }
    }

    /// Process exit code for the command-line harness: 1 usage/config,
    /// 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::KTopOutOfRange { .. } | Error::TooFewSamples { .. } => 1,
            Error::NonFiniteLoss { .. } => 3,
            Error::Shape { .. } | Error::NonScalarLoss(_) | Error::StaleTape => 3,
            _ => 2,
        }
    }
}
