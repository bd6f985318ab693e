use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Observation or option does not match the declared schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Non-finite, negative or otherwise malformed input value.
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Internal invariant broken; the run that hit it must be aborted.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("unknown metric `{name}`; known metrics: {known}")]
    UnknownMetric { name: String, known: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
