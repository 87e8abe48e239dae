use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RgfsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RgfsError {
    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("class `{class}` has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl RgfsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RgfsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            RgfsError::Config(_)
                | RgfsError::InsufficientSamples { .. }
                | RgfsError::Data(_)
                | RgfsError::Shape(_)
        )
    }
}
