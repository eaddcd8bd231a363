//! Out-of-distribution detection on small synthetic problems: metric
//! learning heads, score functions, a conditional diffusion model for
//! label-mixup outliers, and the evaluation harness around them.

// `!(x > 0.0)` is used on purpose throughout: unlike `x <= 0.0` it also
// rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod scores;

pub use checkpoint::Checkpoint;
pub use classifier::{Classifier, TrainConfig};
pub use config::ExperimentConfig;
pub use data::{LabeledDataset, OOD_LABEL};
pub use error::{Error, Result};
pub use losses::{LossKind, MetricHead};
pub use nn::{GradientTape, MlpModel, RealMatrix};
pub use rng::Rng;
pub use scores::ScoreKind;
