//! Error type shared across the crate.

/// Crate-wide error type. Numerical kernels panic on shape violations (those
/// are programming errors); everything that can fail on user input — configs,
/// datasets, checkpoints, vocabulary — returns one of these.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration. Collects every offending field, not just the first.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token/vocabulary mismatch (unknown id, vocabulary disagreement, ...).
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Malformed or mismatched checkpoint contents.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A text file failed to parse; points at the exact line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A loss or gradient went NaN/inf; names the first offending parameter.
    #[error("non-finite {what} detected at parameter `{param}`")]
    NonFinite { what: &'static str, param: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
