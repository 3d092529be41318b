use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pre-training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid action index {action} (scene has {num_actions} actions)")]
    InvalidAction { action: usize, num_actions: usize },

    #[error("resolution {height}x{width} is too small to place the actor (minimum {min})")]
    ResolutionTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("sampling window out of range: start {start} + ({length} - 1) * speed {speed} must be < {frames}")]
    WindowOutOfRange {
        start: usize,
        length: usize,
        speed: usize,
        frames: usize,
    },

    #[error("video {video_id} is too short: {frames} frames cannot hold clip length {length} at speed {speed}")]
    VideoTooShort {
        video_id: String,
        frames: usize,
        length: usize,
        speed: usize,
    },

    #[error("empty clip")]
    EmptyClip,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("map is not normalized: {0}")]
    NotNormalized(String),

    #[error("negative queue is empty")]
    EmptyQueue,

    #[error("teacher failure: {0}")]
    Teacher(String),

    #[error("dataset error for video {video_id}: {message}")]
    Dataset { video_id: String, message: String },

    #[error("malformed manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corrupt checkpoint at byte offset {offset}: {message}")]
    CorruptCheckpoint { offset: u64, message: String },

    #[error("non-finite loss at step {step} (batch video ids: {video_ids:?}): {detail}")]
    NonFiniteLoss {
        step: u64,
        video_ids: Vec<String>,
        detail: String,
    },

    #[error("unknown variant `{0}` (expected full, no_kd or task_independent)")]
    UnknownVariant(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Whether this error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidAction { .. }
                | Error::ResolutionTooSmall { .. }
                | Error::UnknownVariant(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
