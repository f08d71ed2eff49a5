use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("times are not sorted at index {index}")]
    UnsortedTimes { index: usize },
    #[error("every variable fell below the prevalence threshold {threshold}")]
    EmptyVocabulary { threshold: f64 },
    #[error("stay {stay_id} excluded: {len} events exceed max_seq_len {max}")]
    OverLength { stay_id: u64, len: usize, max: usize },
    #[error("token id {id} outside embedding table of {size} rows")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("sequence lacks the {expected}-token special prefix")]
    MissingPrefix { expected: usize },
    #[error("AUROC undefined: {positives} positives, {negatives} negatives")]
    UndefinedMetric { positives: usize, negatives: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error(transparent)]
    Nn(#[from] ehrformer_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
