use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CovarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CovarError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("scene sampling failed for seed {seed} after {tries} tries")]
    SceneSampling { seed: u64, tries: usize },

    #[error("out-of-vocabulary word {0:?}")]
    Vocabulary(String),

    #[error("unreachable goal: {0}")]
    Unreachable(String),

    #[error("non-finite values in {stage} at index {index}")]
    NonFinite { stage: &'static str, index: usize },

    #[error("fully masked modality: {0}")]
    EmptyMask(&'static str),

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training halted at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error("missing model checkpoint: {0}")]
    MissingModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
