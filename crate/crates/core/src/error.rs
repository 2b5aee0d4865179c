use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix could not be factorized even with jitter {0:e}")]
    NotFactorizable(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid scale parameter {0}")]
    InvalidScale(f64),
    #[error("all points are identical; bandwidth is undefined")]
    DegeneratePoints,
    #[error("row set is missing the `{0}` block")]
    MissingBlock(&'static str),
    #[error("training set is empty")]
    EmptyTraining,
    #[error("factorization failed: {0}")]
    FactorizationFailure(String),
    #[error("embedding kernels differ between the two sides")]
    KernelMismatch,
    #[error("count must be at least one")]
    ZeroCount,
    #[error("missing estimator context: {0}")]
    MissingContext(String),
    #[error("no sampler available for {0}")]
    SamplerUnavailable(String),
    #[error("sampler has no anchors")]
    EmptyAnchors,
    #[error("candidate predictive variance {0:e} is not positive")]
    NegativeVariance(f64),
    #[error("pool has {available} candidates, {requested} requested")]
    PoolExhausted { requested: usize, available: usize },
    #[error("covariate table has no continuous columns")]
    NoContinuousColumns,
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("file is empty")]
    EmptyFile,
    #[error("no known outcome mechanism: {0}")]
    UnknownMechanism(String),
    #[error("inconsistent causal-quantity kind: {0}")]
    InconsistentKind(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("config error at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("unsupported spec_version {0}")]
    Version(i64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn schema(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            key: key.into(),
            message: message.into(),
        }
    }
}
