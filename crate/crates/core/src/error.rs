use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Domain errors shared by every module. [`Error::code`] gives the stable
/// machine-readable code surfaced by the CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("vector has no component above 1e-12 in magnitude")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector contains a NaN or infinite component")]
    NonFinite,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid cluster count {requested} for {records} records")]
    InvalidClusterCount { requested: usize, records: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("unknown query `{0}`")]
    UnknownQuery(String),
    #[error("query `{query}`: id `{id}` appears in two disjoint sets")]
    OverlapViolation { query: String, id: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("insufficient examples: {0}")]
    InsufficientExamples(String),
    #[error("positive set is empty")]
    EmptyPositives,
    #[error("query `{query}`: ranking contains few-shot reference id `{id}`")]
    FsrLeak { query: String, id: String },
    #[error("probability distribution has a non-positive component")]
    DistributionInvalid,
    #[error("loss became non-finite at iteration {iteration} (bce = {bce}, kl = {kl})")]
    NonFiniteLoss { iteration: usize, bce: f64, kl: f64 },
    #[error("unknown target id `{0}`")]
    UnknownTargetId(String),
    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("candidate pool is empty")]
    EmptyPool,
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroVector => "ZERO_VECTOR",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::NonFinite => "NON_FINITE",
            Error::DuplicateId(_) => "DUPLICATE_ID",
            Error::EmptyCorpus => "EMPTY_CORPUS",
            Error::InvalidClusterCount { .. } => "INVALID_CLUSTER_COUNT",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::UnknownId(_) => "UNKNOWN_ID",
            Error::UnknownQuery(_) => "UNKNOWN_QUERY",
            Error::OverlapViolation { .. } => "OVERLAP_VIOLATION",
            Error::Schema(_) => "SCHEMA_ERROR",
            Error::InsufficientExamples(_) => "INSUFFICIENT_EXAMPLES",
            Error::EmptyPositives => "EMPTY_POSITIVES",
            Error::FsrLeak { .. } => "FSR_LEAK",
            Error::DistributionInvalid => "DISTRIBUTION_INVALID",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::UnknownTargetId(_) => "UNKNOWN_TARGET_ID",
            Error::MissingEmbedding(_) => "NO_EMBEDDING",
            Error::EmptyPool => "EMPTY_POOL",
        }
    }
}
