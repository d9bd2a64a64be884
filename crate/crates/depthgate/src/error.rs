//! Crate-wide error type. Configuration and I/O problems are recoverable
//! `Err`s; violated numeric invariants inside the tape panic instead.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, fractions out of range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid external input (corpus too small, token id out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A training run hit a non-finite loss and stopped. The diagnostic dump
    /// has already been written to the run directory at this point.
    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
