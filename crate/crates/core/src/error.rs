use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("language `{0}` is not registered")]
    UnknownLanguage(String),

    #[error("script range {new} overlaps existing range {existing}")]
    ScriptOverlap { new: String, existing: String },

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing threshold: {0}")]
    MissingThreshold(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
