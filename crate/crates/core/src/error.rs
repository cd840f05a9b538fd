use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no images found under {}", .0.display())]
    EmptyDataset(PathBuf),
    #[error("{} image(s) have no matching mask: {}", .0.len(), list_paths(.0))]
    MissingMask(Vec<PathBuf>),
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("failed to decode {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("channel count {channels} is not divisible by reduction {reduction}")]
    BadReduction { channels: usize, reduction: usize },
    #[error("spatial attention kernel must be odd, got {0}")]
    BadKernel(usize),
    #[error("incompatible shapes: {0}")]
    ShapeIncompatible(String),
    #[error("unknown model label `{0}`")]
    UnknownLabel(String),
    #[error("incompatible input shape: {0}")]
    IncompatibleShape(String),
    #[error("tversky beta must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("focal exponent must be positive, got {0}")]
    BadGamma(f64),
    #[error("run history has no records")]
    EmptyHistory,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },
    #[error("training budget exhausted: {0}")]
    OutOfBudget(String),
    #[error("incomplete experiment grid, missing: {}", .0.join(", "))]
    IncompleteGrid(Vec<String>),
    #[error("no run data to report")]
    NoData,
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
