use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, shapes or problem settings.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// An API used in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// A point or value outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// Training diverged.
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
