//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DtError {
    #[error("empty session")]
    EmptySession,

    #[error("non-causal return: next_day {next_day} <= session day {day}")]
    NonCausalReturn { day: u32, next_day: u32 },

    #[error("empty reward sequence")]
    EmptyRewards,

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("duplicate session for user {user_id} on day {day}")]
    DuplicateSession { user_id: u64, day: u32 },

    #[error("categorical id {id} out of range for table of size {size}")]
    CategoryOutOfRange { id: u32, size: usize },

    #[error("non-finite numeric feature")]
    NonFiniteFeature,

    #[error("item id {id} exceeds vocabulary size {vocab}")]
    ItemOutOfVocab { id: u32, vocab: usize },

    #[error("value {value} outside [0, 1]")]
    ValueOutOfRange { value: f64 },

    #[error("remaining horizon must be >= 1, got {horizon}")]
    BadHorizon { horizon: i64 },

    #[error("batch size mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },

    #[error("rtg prompt {value} outside [0, {max}]")]
    PromptOutOfRange { value: f64, max: f64 },

    #[error("expected {expected} reward classes, got {got}")]
    BadClassCount { expected: usize, got: usize },

    #[error("empty truth list")]
    EmptyTruth,

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("no trajectories to train on")]
    EmptyTrainSet,

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DtError>;
