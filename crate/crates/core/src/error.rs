use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {0} has no support examples")]
    EmptyClass(usize),
    #[error("expected {expected} per-layer learning rates, got {actual}")]
    RateCount { expected: usize, actual: usize },
    #[error("invalid learning rate {rate} for layer {layer}")]
    InvalidRate { layer: usize, rate: f64 },
    #[error("no head attached to the network")]
    MissingHead,
    #[error("invalid dataset parameters: {0}")]
    InvalidDataset(String),
    #[error("insufficient data for episode: {0}")]
    InsufficientData(String),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid learning-rate zoo: {0}")]
    InvalidZoo(String),
    #[error("invalid search configuration: {0}")]
    InvalidSearchConfig(String),
    #[error("search space of {0} schemes exceeds the exhaustive limit of 100000")]
    SpaceTooLarge(u128),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fitness evaluation failed: {0}")]
    Fitness(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
