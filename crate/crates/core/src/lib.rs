//! Semi-supervised video classification: augmentation, adaptive
//! thresholds, loss-gated super augmentation, cross-set interpolation,
//! a small video transformer and the training loop tying them together.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod sab;
pub mod thresholds;
pub mod trainer;
pub mod types;
pub mod vcam;

pub use config::{Arm, ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use types::{LabeledSample, Prediction, PseudoLabeledSample, SampleId, UnlabeledSample, VideoTensor};
pub use trainer::{EvalMetrics, TrainData, TrainMetrics, Trainer};
