//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("unknown compression level cg={0}")]
    UnknownLevel(u32),

    #[error("level set invalid: {0}")]
    InvalidLevelSet(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic bytes in wire record")]
    BadMagic,

    #[error("wire version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u8, got: u8 },

    #[error("truncated wire record: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing ground truth for task {0}")]
    MissingGroundTruth(String),

    #[error("missing loss weight for task {0}")]
    MissingWeight(String),

    #[error("undefined correlation: {0}")]
    DegenerateCorrelation(String),

    #[error("unknown segment id {0}")]
    UnknownSegment(u32),
}

pub type Result<T> = std::result::Result<T, Error>;
