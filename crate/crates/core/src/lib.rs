//! Skin lesion segmentation toolkit.
//!
//! The crate covers the whole experimental pipeline: dataset ingestion
//! ([`dataset`]), augmentation ([`augment`]), network building blocks and the
//! ten U-Net variants ([`blocks`], [`models`]), overlap metrics and losses
//! ([`metrics`]), the training protocol and experiment grid ([`train`]), and
//! regeneration of result tables and figures from persisted runs ([`report`]).
//!
//! Tensors handed to networks use the `(batch, channels, height, width)`
//! layout; [`dataset::Sample`] keeps images as `height × width × 3` arrays.

pub mod augment;
pub mod blocks;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod train;

pub use augment::{AugConfig, AugLabel, RngStream};
pub use dataset::{DatasetIndex, Sample, Split};
pub use error::{Error, Result};
pub use metrics::{MeanStd, MetricRecord, RunHistory};
pub use models::{Model, ModelLabel, ModelSpec};
pub use report::{TableArtifact, TableKind};
pub use train::{ExperimentResult, RunDir, TrainConfig};
