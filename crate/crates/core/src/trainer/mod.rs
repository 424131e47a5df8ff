//! Optimization of an interpretation network: Adam, data sources, the
//! training loop and resumable checkpoints.

mod adam;
mod checkpoint;
mod config;
mod data;
mod train;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LossMode, TrainConfig};
pub use data::{DataSource, LatentTableSource, LinearGaussianSource, PairFileSource, WorldSource};
pub use train::{train, write_metrics_csv, StepMetrics, TrainOutcome, Trainer};
