use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Graph errors carry the id of the node that failed so a bad model
/// definition can be traced back to the op that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("node {node}: shape mismatch: {msg}")]
    Shape { node: usize, msg: String },

    #[error("node {node}: non-finite value produced by {op}")]
    NonFinite { node: usize, op: String },

    #[error("invalid op attribute: {0}")]
    Attribute(String),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("gradient supplied for frozen parameter `{0}`")]
    FrozenGradient(String),

    #[error("mask prefix `{0}` does not match any parameter")]
    UnmatchedPrefix(String),

    #[error("mask prefix `{0}` names no known parameter family")]
    UnknownPrefix(String),

    #[error("infeasible scene: {0}")]
    Infeasible(String),

    #[error("modality mismatch: expected {expected}, got {got}")]
    ModalityMismatch { expected: String, got: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
