use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("OOD conditioning: conditioning RTG has zero mass (bucket {bucket})")]
    OodConditioning { bucket: usize },

    #[error("OOD conditioning: return {value} has zero probability at state {state}")]
    OodReturn { state: usize, value: f64 },

    #[error("infinite KL: trajectory has positive probability under the policy but zero under the reference")]
    InfiniteKl,

    #[error("zero tail mass at cut point {0}")]
    ZeroTailMass(f64),

    #[error("enumeration bound exceeded: {0}")]
    EnumerationBound(String),

    #[error("non-finite loss at iteration {iteration} (batch {batch:?})")]
    NonFiniteLoss { iteration: usize, batch: Vec<usize> },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: u64, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
