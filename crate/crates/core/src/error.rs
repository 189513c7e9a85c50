use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    MissingArtifact,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::MissingArtifact => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("landmarks are degenerate: {0}")]
    DegenerateLandmarks(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least {needed} identities, found {found}")]
    InsufficientIdentities { needed: usize, found: usize },
    #[error("resolution mismatch: expected {expected}, got {got}")]
    ResolutionMismatch { expected: usize, got: usize },
    #[error("block range {first}..={last} outside 1..={count}")]
    IndexOutOfRange { first: usize, last: usize, count: usize },
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid face: {0}")]
    InvalidFace(String),
    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no margin for block {0}")]
    MissingMargin(usize),
    #[error("no samples for block {0}")]
    EmptyBlock(usize),
    #[error("distance distribution is empty")]
    EmptyDistribution,
    #[error("need at least {needed} samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("no reference image paired with {0}")]
    Unpaired(PathBuf),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NonPsdCovariance(f64),
    #[error("non-finite loss at step {step}: {terms}")]
    NonFiniteLoss { step: u64, terms: String },
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error("no data to plot")]
    NoData,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidConfig(_) | ConfigMismatch(_) => ErrorClass::Usage,
            CheckpointNotFound(_) => ErrorClass::MissingArtifact,
            Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorClass::MissingArtifact,
            ZeroVector | NonPsdCovariance(_) | NonFiniteLoss { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
