//! Fine-grained semantic alignment for micro-gesture recognition on a
//! synthetic keypoint benchmark: data generation, encoders, contrastive
//! objectives, two-stage training and evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use encoders::{HierarchicalFeatures, Model, ModelConfig, SemanticEmbedding};
pub use error::{Error, Result};
pub use eval::{AblationReport, EvalMetrics, MatrixSpec};
pub use objectives::{LossBreakdown, LossWeights, Stage};
pub use synth::{DatasetConfig, DatasetSplit, Split, VideoClip};
pub use tensor::Matrix;
pub use trainer::{Components, FgTextMode, TrainConfig};
