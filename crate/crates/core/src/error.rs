use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate key ({key}) on lines {first_line} and {second_line}")]
    DuplicateKey {
        key: String,
        first_line: u64,
        second_line: u64,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("panel incomplete: {missing} missing cell(s), {duplicates} duplicate cell(s){}", first_missing.as_ref().map(|c| format!(", first missing {c}")).unwrap_or_default())]
    IncompletePanel {
        missing: usize,
        duplicates: usize,
        first_missing: Option<String>,
    },

    #[error("national cell missing: {0}")]
    NationalCellMissing(String),

    #[error("national baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("feature matrix is already standardized")]
    AlreadyStandardized,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("need at least {required} points, got {actual}")]
    TooFewPoints { required: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("perplexity must be < n (perplexity {perplexity}, n {n})")]
    PerplexityTooLarge { perplexity: f64, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("optimization diverged at iteration {iteration} (learning rate {learning_rate})")]
    Divergence { iteration: usize, learning_rate: f64 },

    #[error("k must satisfy 1 <= k <= n (k {k}, n {n})")]
    InvalidK { k: usize, n: usize },

    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("silhouette needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
