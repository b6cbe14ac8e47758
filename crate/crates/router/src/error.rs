use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the individual subsystems so callers can match on what actually went wrong.
#[derive(Debug, Error)]
pub enum Error {
    // pool
    #[error("duplicate model name: {0}")]
    DuplicateName(String),
    #[error("negative price on model {0}")]
    NegativePrice(String),
    #[error("local model {0} has nonzero price")]
    LocalWithNonzeroPrice(String),
    #[error("pool too small: {0} models, need at least 3")]
    PoolTooSmall(usize),
    #[error("empty model group")]
    EmptyGroup,
    #[error("invalid pool config: {0}")]
    InvalidPoolConfig(String),

    // decomposition
    #[error("subtask {0} is missing its evaluation token count")]
    MissingTokenCounts(usize),
    #[error("decomposition has no coherence count")]
    MissingCoherence,
    #[error("coherence judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("decomposition generator failed: {0}")]
    GeneratorFailure(String),

    // allocation search
    #[error("token probability sequence is empty")]
    EmptyProbSequence,
    #[error("invalid difficulty thresholds: tau2 {tau2} must be < tau1 {tau1}")]
    InvalidThresholds { tau1: f64, tau2: f64 },
    #[error("iteration limit must be in 1..=20, got {0}")]
    InvalidLimit(usize),

    // grpo
    #[error("trajectory group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("probability ratio must be positive, got {0}")]
    NonpositiveRatio(f64),
    #[error("distribution support mismatch")]
    SupportMismatch,
    #[error("trajectory batch is empty")]
    EmptyBatch,
    #[error("gradient contains non-finite entries")]
    NonfiniteGradient,
    #[error("rollout environment failure: {0}")]
    EnvFailure(String),

    // orchestrator
    #[error("subtask executor failed: {0}")]
    ExecutorFailure(String),
    #[error("no traces to aggregate")]
    EmptyTraces,
    #[error("label/prediction subtask counts differ for task {0}")]
    LabelMismatch(String),
    #[error("strong model failed during review: {0}")]
    StrongModelFailure(String),

    // sim env
    #[error("instance too large for exhaustive enumeration: k={k}, pool={pool}")]
    InstanceTooLarge { k: usize, pool: usize },

    // backend
    #[error("authentication rejected by endpoint")]
    AuthError,
    #[error("rate limited by endpoint")]
    RateLimited,
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("retries exhausted after {0} attempts")]
    TimeoutExhausted(usize),
    #[error("no recorded exchange for request digest {0}")]
    CassetteMiss(String),
    #[error("cassette file is corrupt: {0}")]
    CorruptCassette(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
