use thiserror::Error;

/// Errors raised anywhere in the trajectory pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("{0}")]
    Data(String),

    /// A row-level ingestion problem, with a 1-based line number.
    #[error("{message} at line {line}")]
    Row { line: usize, message: String },

    /// Invalid configuration or violated precondition on a parameter.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A statistical quantity could not be estimated from the data at hand.
    #[error("{0}")]
    NotIdentifiable(String),

    /// An LLM reply that did not contain a usable score.
    #[error("could not parse score from reply: {0}")]
    Parse(String),

    /// The embedding backend failed for a specific record.
    #[error("embedding failed for subject {subject_id} at t={timestamp}: {reason}")]
    Embed {
        subject_id: String,
        timestamp: f64,
        reason: String,
    },

    /// Transport-level failure talking to a chat-completion endpoint.
    #[error("backend error: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
