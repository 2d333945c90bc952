//! Losses, optimizer, metrics and the training loop.

pub mod loss;
pub mod metrics;
pub mod optim;
mod trainer;

pub use loss::{ce_loss, combined_loss, dice_loss, one_hot, record_loss, LossConfig};
pub use metrics::{confusion_metrics, dsc_metric, hausdorff, hausdorff95, ConfusionMetrics, DscReport};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use trainer::{evaluate, EpochRecord, EvalMetrics, TrainConfig, Trainer};
