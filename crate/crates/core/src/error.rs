use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest error: {details}")]
    Manifest { details: String },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("segmenter oracle failed on box {box_index}: {details} (retryable)")]
    OracleFailure { box_index: usize, details: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "feature extractor not found at {path}: fetch or convert one offline and point \
         SEG_CYCLEGAN_FEATURE_EXTRACTOR (or the config key) at it, or use the stub extractor"
    )]
    ExtractorMissing { path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {details}")]
    Image { path: PathBuf, details: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
