use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("row {row} has no valid elements")]
    DegenerateRow { row: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("locality mask must have at least one position")]
    EmptyMask,

    #[error("variance must be positive, got {0}")]
    InvalidVariance(f64),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("infeasible assignment: {queries} queries but only {clips} clips")]
    InfeasibleAssignment { queries: usize, clips: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("brute-force size guard exceeded: {rows}x{cols} (max 6x8)")]
    SizeGuard { rows: usize, cols: usize },

    #[error("batch needs at least two videos to form negatives, got {0}")]
    NoNegatives(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("interpolation weights ({0}, {1}) are not on the simplex")]
    InvalidWeights(f64, f64),

    #[error("missing ground truth for query {0}")]
    MissingTruth(u32),

    #[error("duplicate identifier {0}")]
    DuplicateId(u32),

    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("infeasible corpus spec: {0}")]
    InfeasibleSpec(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("no multi-query videos to analyse")]
    NoMultiQueryVideos,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
