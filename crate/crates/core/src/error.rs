//! Error taxonomy shared by the whole pipeline.
//!
//! The split matters at the CLI boundary: data errors exit 2, transport
//! errors exit 3. Everything else is a plain I/O failure.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent inputs: bad corpus lines, invalid matrices,
    /// corrupt record logs, digest mismatches, out-of-domain values.
    #[error("data error: {0}")]
    Data(String),

    /// Endpoint unreachable, authentication rejected, or retries exhausted
    /// on a request the run cannot proceed without.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn transport(msg: impl Into<String>) -> Self {
        Error::Transport(msg.into())
    }
}
