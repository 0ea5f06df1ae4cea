use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// All importance weights vanished, or the batch carries no information.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("world file: {0}")]
    World(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
