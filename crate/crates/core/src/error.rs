use thiserror::Error;

/// Errors surfaced by every layer of the dictionary.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    /// The key set violates the weight predicate (tie or weight below the floor).
    #[error("failure event detected: {0}")]
    FailureDetected(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// An encoder produced a value that does not fit its declared universe.
    #[error("capacity violation: {0}")]
    CapacityViolation(String),
    #[error("corrupt encoding: {0}")]
    Corruption(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
