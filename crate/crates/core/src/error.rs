use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification space: {0}")]
    InvalidSpace(String),
    #[error("{field} = {value} is outside its range [{lower}, {upper}]")]
    OutOfRange {
        field: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad lattice levels: {0}")]
    BadLevels(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("region rejection sampler accepted no point in {0} proposals")]
    EmptyRegion(usize),
    #[error("design row {0} duplicates an earlier row")]
    DuplicatePoint(usize),

    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("target log-density is NaN at step {step}")]
    NonFiniteTarget { step: usize },
    #[error("too few draws for a summary: {got} < {min}")]
    TooFewDraws { got: usize, min: usize },
    #[error("posterior moment undefined: {0}")]
    MomentUndefined(String),

    #[error("covariance matrix is singular after jitter escalation")]
    SingularCovariance,
    #[error("mean basis is rank deficient on the training design")]
    RankDeficientBasis,
    #[error("negative predictive variance {0}")]
    NegativeVariance(f64),
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid training data: {0}")]
    InvalidTraining(String),

    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("decision criterion refers to unknown output `{0}`")]
    CriteriaUnknownOutput(String),

    #[error("point does not belong to the store's space: {0}")]
    SpaceMismatch(String),
    #[error("emulator `{output}` failed canary verification (max deviation {max_diff:e})")]
    ChecksumMismatch { output: String, max_diff: f64 },
    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unsupported store format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
    #[error("manifest lists missing file {0}")]
    MissingFile(PathBuf),
    #[error("store at {0} is locked by another writer")]
    StoreLocked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
