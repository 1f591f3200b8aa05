//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes of two operands do not line up (sizes, channel counts, kernel counts).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter violates its contract (even kernel size, negative threshold, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file on disk is not in the expected format or is truncated.
    #[error("corrupt or incompatible file{}: {msg}", path_suffix(.path))]
    Corrupt { path: Option<PathBuf>, msg: String },

    /// Image file uses a pixel format this crate does not handle.
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    /// Dataset-level problem: empty directory, missing counterpart, bad id.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity was produced where finite values are required.
    #[error("numerical failure in {stage}: non-finite value")]
    NonFinite { stage: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt { path: None, msg: msg.into() }
    }

    pub fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Corrupt { msg, .. } => Error::Corrupt { path: Some(path.into()), msg },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
