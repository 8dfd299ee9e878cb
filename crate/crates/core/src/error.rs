use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("infeasible alignment: {0}")]
    Infeasible(String),
    #[error("incompatible delta: {0}")]
    IncompatibleDelta(String),
    #[error("unknown tensor: {0}")]
    UnknownTensor(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
