use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {field}: {constraint}")]
    Config { field: String, constraint: String },

    #[error("{n_classes} classes cannot be divided into {n_splits} splits")]
    IndivisibleSplits { n_classes: usize, n_splits: usize },

    #[error("class {class_id} has {available} samples, need at least {needed}")]
    InsufficientSamples {
        class_id: u32,
        available: usize,
        needed: usize,
    },

    #[error("crop {crop}×{crop} is larger than the {h}×{w} image")]
    CropTooLarge { crop: usize, h: usize, w: usize },

    #[error("image {h}×{w} is smaller than the backbone minimum {min}×{min}")]
    ImageTooSmall { h: usize, w: usize, min: usize },

    #[error("expected {expected} cascade networks, got {got}")]
    NetworkCount { expected: usize, got: usize },

    #[error("class leakage: test class {0} appears in the pretraining stream")]
    ClassLeakage(u32),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("fingerprint mismatch: checkpoint {checkpoint}, config {config}")]
    Fingerprint { checkpoint: String, config: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            constraint: constraint.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration and validation failures, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::IndivisibleSplits { .. }
                | Error::CropTooLarge { .. }
                | Error::ImageTooSmall { .. }
                | Error::NetworkCount { .. }
                | Error::Fingerprint { .. }
                | Error::ClassLeakage(_)
        )
    }
}
