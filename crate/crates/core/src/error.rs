use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite tensor: {0}")]
    NonFinite(String),

    #[error("no prunable layers")]
    NoPrunableLayers,

    #[error("shape mismatch: {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("not a DMB file")]
    NotDmb,

    #[error("unsupported DMB version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("tensor byte-length mismatch for entry `{0}`")]
    ByteLengthMismatch(String),

    #[error("count {count} out of range 0..={max}")]
    CountOutOfRange { count: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("search space too large: {0} grid points")]
    SearchTooLarge(u128),

    #[error("finetuning diverged at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { epoch: usize, loss: f64, initial: f64 },

    #[error("missing gradients for prunable layer {0}")]
    MissingGradients(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
