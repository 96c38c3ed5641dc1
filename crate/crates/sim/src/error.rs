use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    /// Malformed or inconsistent scenario input.
    #[error("{0}")]
    Input(String),
    /// The scenario parsed but the world could not be built from it.
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
