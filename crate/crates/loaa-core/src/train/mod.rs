//! Training harness: optimizers, mixup, metrics, the seeded train loop, and
//! the kernel/placement ablation runner.

pub mod ablation;
pub mod metrics;
pub mod mixup;
pub mod optim;
mod run;

pub use ablation::{run_ablation, AblationCell, AblationPlan, AblationRow, CellResult};
pub use metrics::{mean_average_precision, top1_accuracy, MapOutcome, Metrics};
pub use mixup::{mix_with, mixup_batch, MixupOutput};
pub use optim::{OptimConfig, OptimState, OptimizerKind, StepStats};
pub use run::{
    epoch_order, train, DatasetSplits, EpochRecord, Model, SplitData, TrainConfig, TrainMode,
    TrainOutcome,
};
