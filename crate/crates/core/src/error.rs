use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: left shape {left:?}, right shape {right:?}")]
    DimensionMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward was already run on this tape")]
    BackwardAlreadyRun,

    #[error("loss does not depend on any differentiable leaf")]
    DetachedGraph,

    #[error("gradient is uninitialized for {0}")]
    UninitializedGradient(String),

    #[error("cannot encode {ch:?} at offset {offset}: not in the vocabulary alphabet")]
    Encoding { ch: char, offset: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("stale target cache: no entry for example {example_id:?} position {position}")]
    StaleCache { example_id: String, position: usize },

    #[error("target cache model hash mismatch: cache built from {cache_hash}, model is {model_hash}")]
    CacheHashMismatch { cache_hash: String, model_hash: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("pareto dominance ratio undefined for fewer than two methods")]
    UndefinedPdr,

    #[error("eval set contaminated: record {0} also appears in the forget set")]
    Contamination(String),

    #[error(
        "memorization target unmet: exact match {exact_match:.3} below {target:.3} after {epochs} epochs"
    )]
    MemorizationFailure {
        exact_match: f64,
        target: f64,
        epochs: usize,
    },

    #[error("non-finite loss in {method} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        method: String,
        epoch: usize,
        batch: usize,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
