//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A word-part resource cannot yield enough unique entries.
    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),

    /// A request exceeds a hard capacity bound (digest bits, template bank, ...).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An entity string is not present in the codebook.
    #[error("unknown {field} entry: {value:?}")]
    Lookup { field: &'static str, value: String },

    /// A token sequence does not fit the model context.
    #[error("sequence length {len} exceeds limit {limit}")]
    Length { len: usize, limit: usize },

    /// A non-finite value was produced or encountered.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid argument to an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Misconfiguration with a suggested remedy.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training loss failed to improve over the patience window.
    #[error("training diverged at learning rate {learning_rate}: {detail}")]
    Divergence { learning_rate: f64, detail: String },

    /// A causal trace produced no usable signal.
    #[error("degenerate trace: {0}; try a larger noise sigma")]
    DegenerateTrace(String),

    /// The preserved-key span leaves no room for null-space updates.
    #[error("no null-space capacity: {0}; use fewer preserved keys or a larger hidden size")]
    NoCapacity(String),

    /// A key sample was empty or unusable.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Tensor shape or config mismatch between two models.
    #[error("merge mismatch on tensor {tensor:?}: {detail}")]
    MergeMismatch { tensor: String, detail: String },

    /// Weight-file load failures, one variant per failure mode.
    #[error("bad magic bytes in weight file")]
    LoadMagic,
    #[error("unsupported weight-file version {0}")]
    LoadVersion(u8),
    #[error("tensor shape mismatch in weight file: {0}")]
    LoadShape(String),
    #[error("weight file truncated: {0}")]
    LoadTruncated(String),

    /// A fingerprint triple could not be embedded within the retry budget.
    #[error("embedding failed on triple {triple_index} after {attempts} attempts")]
    EmbeddingFailed {
        triple_index: usize,
        attempts: usize,
        report: Box<crate::editor::EmbedReport>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
