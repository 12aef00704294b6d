//! Crate-wide error type.
//!
//! Variants are grouped so the CLI can map them onto its exit codes:
//! usage/config problems, bad data or geometry, and internal invariant
//! violations (sequencing, state, missing offsets).

use crate::plan::RelOffset;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("out of range: {0}")]
    Range(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("state error: {0}")]
    State(String),
    #[error("offset {0:?} missing from the relative-position table")]
    MissingOffset(RelOffset),
    #[error("attention row {0} has no visible key")]
    DegenerateRow(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class used by the CLI: 1 usage, 2 data/geometry, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Range(_)
            | Error::Geometry(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Shape(_)
            | Error::Sequencing(_)
            | Error::State(_)
            | Error::MissingOffset(_)
            | Error::DegenerateRow(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
