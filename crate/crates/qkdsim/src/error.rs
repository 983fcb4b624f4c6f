//! Crate error types.

use thiserror::Error;

/// A precondition on a numeric argument was violated.
#[derive(Debug, Clone, Error)]
#[error("domain error: {0}")]
pub struct DomainError(String);

impl DomainError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// Wire-protocol decode/encode failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: declared {declared} payload bytes, {available} available")]
    Truncated { declared: usize, available: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload length {0} exceeds the {1}-byte limit")]
    OverLength(usize, usize),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

/// Classical-channel transport failures.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer closed the channel")]
    Closed,
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("bad transport spec '{0}': expected 'inproc' or 'tcp:host:port'")]
    BadSpec(String),
}

/// Errors surfaced by a full simulation run.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}
