//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {op} at coordinate {coord}")]
    NonFinite { op: &'static str, coord: usize },

    #[error("alphabet too wide: {symbols} symbols (limit {limit})")]
    AlphabetTooWide { symbols: usize, limit: usize },

    #[error("corrupted bitstream: {0}")]
    CorruptStream(String),

    #[error("truncated packet at frame {frame}")]
    TruncatedPacket { frame: usize },

    #[error("missing frame {frame}")]
    MissingFrame { frame: usize },

    #[error("bad frame order: got {got}, expected {expected}")]
    FrameOrder { got: u64, expected: u64 },

    #[error("checkpoint/config hash mismatch (ours {ours}, theirs {theirs})")]
    HashMismatch { ours: String, theirs: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;
