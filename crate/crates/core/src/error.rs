//! Error type shared by all verification modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid property: {0}")]
    InvalidProperty(String),
    #[error("inconsistent split set: {0}")]
    InconsistentSplit(String),
    #[error("neuron ({layer},{index}) is not ambiguous and cannot be split")]
    NonAmbiguousSplit { layer: usize, index: usize },
    #[error("size cap exceeded: {requested} > {limit}")]
    SizeCapExceeded { limit: usize, requested: usize },
    #[error("dual value is non-finite")]
    NonFiniteDual,
    #[error("gradient is non-finite")]
    NonFiniteGradient,
    #[error("no candidate branching neurons available")]
    EmptyCandidates,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty queue")]
    EmptyQueue,
    #[error("parameter architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("no recorded forward pass")]
    NoRecordedPass,
    #[error("ambiguity target {target} unreachable after {attempts} attempts (best fraction {best})")]
    AmbiguityTargetUnreachable {
        target: f64,
        best: f64,
        attempts: usize,
    },
    #[error("lp error: {0}")]
    Lp(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
