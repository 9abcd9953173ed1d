use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("index {index} out of range for {len} entries in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("backward requires a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    /// Failure inside a function evaluated by the gradient checker.
    #[error("function under check failed: {0}")]
    Function(String),
}

/// Errors raised while reading or validating bracketed trees and datasets.
#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("parse error at byte {offset} (1-based): {message}")]
    Parse { offset: usize, message: String },
    #[error("tree has {n_nodes} nodes, above the cap of {cap}")]
    TooLarge { n_nodes: usize, cap: usize },
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Errors raised by the kernel module.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{kind} enumeration refused: tree has {n_nodes} nodes, cap is {cap}")]
    TooLarge {
        kind: &'static str,
        n_nodes: usize,
        cap: usize,
    },
    #[error("invalid kernel config: {0}")]
    Config(String),
    #[error("perceptron needs two classes, found {0:?}")]
    SingleClass(Vec<String>),
    #[error("perceptron supports binary labels only, found {0:?}")]
    NotBinary(Vec<String>),
}

/// Errors raised by model construction, loss evaluation and training.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("negative Lagrangian multiplier {value} for {key}")]
    NegativeLambda { key: String, value: f64 },
    #[error("label index {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        /// Parameters from the last completed epoch.
        last_good: Box<crate::model::Checkpoint>,
    },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions ({0}) and golds ({1}) differ in length")]
    Length(usize, usize),
    #[error("need at least two classes, got {0}")]
    Classes(usize),
    #[error("cannot split {n} samples into {k} folds")]
    Split { n: usize, k: usize },
}
