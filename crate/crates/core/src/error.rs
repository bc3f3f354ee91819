use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension { what: &'static str, expected: usize, actual: usize },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("unsupported identifier width {0} (expected 16 or 32)")]
    IdBits(usize),

    #[error("bad payload length {0} (expected 152 or 168)")]
    PayloadLength(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },

    #[error("missing image {0}")]
    MissingImage(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config {path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },

    #[error("non-finite loss at step {step} ({component})")]
    NonFiniteLoss { step: usize, component: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("warp rejected {0} times (landmarks out of bounds or displacement too small)")]
    WarpOutOfBounds(usize),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
