use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UfalError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dropout rate {0} is outside [0, 1)")]
    DropoutRate(f64),
    #[error("batch of {batch} rows cannot be split into {replicas} replicas")]
    ReplicaSplit { batch: usize, replicas: usize },
    #[error("class index {class} out of range for {n_classes} classes")]
    ClassIndex { class: usize, n_classes: usize },
    #[error("class list is empty")]
    EmptyClass,
    #[error("no class has any pseudo-labelled target sample")]
    NoClasses,
    #[error("no class has a feature mean yet")]
    ColdMeans,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("no image found under {0}")]
    NoImages(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, UfalError>;
