use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("insufficient history: need {need} days, got {got}")]
    InsufficientHistory { need: usize, got: usize },

    #[error("too few samples: entity {entity} has {got} windows, need at least {need}")]
    TooFewSamples { entity: usize, got: usize, need: usize },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("shape mismatch: manifest expects {expected} values, binary holds {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("truncated binary {path}: {reason}")]
    TruncatedBinary { path: PathBuf, reason: String },

    #[error("missing labels file {0}")]
    MissingLabels(PathBuf),

    #[error("malformed csv {path}, line {line}: {reason}")]
    MalformedCsv {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("graph needs at least {need} nodes, got {got}")]
    TooFewNodes { need: usize, got: usize },

    #[error("nonfinite gradient in parameter {0}")]
    NonfiniteGradient(String),

    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("no training errors for entity {0}")]
    EmptyEntityErrors(usize),

    #[error("AUC undefined: labels contain a single class")]
    SingleClassLabels,

    #[error("training set contains no normal samples")]
    NoNormalSamples,

    #[error("missing graph: {0}")]
    MissingGraph(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
