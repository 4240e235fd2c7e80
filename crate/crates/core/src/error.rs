use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported WAV encoding: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("{path}: file contains no audio samples")]
    EmptyAudio { path: PathBuf },

    #[error("{path}: malformed WAV: {detail}")]
    MalformedWav { path: PathBuf, detail: String },

    #[error("invalid sample rate: {0}")]
    InvalidSampleRate(u32),

    #[error("{path}, row {row}: {detail}")]
    AnnotationParse {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode capacity: {0}")]
    EpisodeCapacity(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("backward called without a cached training-mode forward pass")]
    NoCachedForward,

    #[error("{file}: needs at least {needed} POS events for support, found {found}")]
    InsufficientShots {
        file: String,
        needed: usize,
        found: usize,
    },

    #[error("{file}: negative segment pool is empty")]
    EmptyNegativePool { file: String },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("dataset path not found: {0}")]
    MissingPath(PathBuf),

    #[error("{0}")]
    Eval(String),

    #[error("experiment plan: {0}")]
    Plan(String),
}

pub type Result<T> = std::result::Result<T, Error>;
