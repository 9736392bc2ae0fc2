use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("salt must be at least {min} bytes, got {got}")]
    SaltTooShort { got: usize, min: usize },

    #[error("index {index} out of range for codebook of size {n}")]
    IndexOutOfRange { index: u64, n: u64 },

    #[error("group {group} out of range for {m} groups")]
    GroupOutOfRange { group: u64, m: u64 },

    #[error("invalid codebook spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("tensor contains non-finite values")]
    NonFinite,

    #[error("ring geometry does not fit the tensor: {0}")]
    GeometryDoesNotFit(String),

    #[error("invalid search config: {0}")]
    InvalidSearch(String),

    #[error("zero-variance input cannot be normalised")]
    ZeroVariance,

    #[error("zero-norm vector has no cosine similarity")]
    ZeroNorm,

    #[error("invalid channel parameters: {0}")]
    InvalidChannel(String),

    #[error("calibration did not converge after {rounds} rounds: {detail}")]
    CalibrationDiverged { rounds: u32, detail: String },

    #[error("invalid attack: {0}")]
    InvalidAttack(String),

    #[error("empty image set")]
    EmptySet,

    #[error("invalid detection config: {0}")]
    InvalidDetection(String),

    #[error("sketch index built for a different codebook")]
    StaleIndex,

    #[error("sketch index needs {needed} bytes, budget is {budget}")]
    MemoryBudget { needed: usize, budget: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

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
