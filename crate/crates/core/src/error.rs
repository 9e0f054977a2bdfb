// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Every failure the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum NspuError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("inversion diverged: {0}")]
    InversionDiverged(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("incompatible models: {0}")]
    IncompatibleModels(String),

    #[error("incomplete report: missing {0}")]
    IncompleteReport(&'static str),

    #[error("incomplete FLOPs spec: {0}")]
    IncompleteSpec(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` is missing input {path}: {hint}")]
    StageInput {
        stage: String,
        path: PathBuf,
        hint: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NspuError>;

impl NspuError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NspuError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, missing stage inputs).
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            NspuError::Config(_)
                | NspuError::StageInput { .. }
                | NspuError::Parse { .. }
                | NspuError::InvalidParameter(_)
                | NspuError::CorpusTooSmall(_)
        )
    }
}
