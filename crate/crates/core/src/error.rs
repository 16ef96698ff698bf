use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },

    #[error("invalid data in {entry}: {message}")]
    Data { entry: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("domain `{0}` is already registered")]
    DuplicateDomain(String),

    #[error("variate `{variate}` already exists in domain `{domain}`")]
    VariateCollision { domain: String, variate: String },

    #[error("variate index {index} out of range for domain `{domain}` ({count} variates)")]
    VariateIndex { domain: String, index: usize, count: usize },

    #[error("no visible tokens to encode")]
    EmptyVisibleSet,

    #[error("no valid tokens: {0}")]
    NoValidTokens(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is corrupted: {0}")]
    Corrupted(String),

    #[error("rank-deficient input: {0}")]
    RankDeficient(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
