//! Data synthesis and augmentation, schedules and the optimizer, the
//! training step and the end-to-end loop.

mod config;
mod data;
mod model;
mod optim;
mod run;
mod step;

pub use config::{AugmentationSpec, DatasetMode, DatasetSpec, TrainConfig, TransformerConfig};
pub use data::{augment, synthesize_dataset, Dataset, Split};
pub use model::{from_checkpoint, to_checkpoint, Branch, CheckpointMeta, Model, CHECKPOINT_FORMAT};
pub use optim::{lr_schedule, transformer_lr, Sgd};
pub use run::{run_training, RunOutcome, CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE};
pub use step::{embedding_std, step_objective, Bound, StepForward, StepMetrics, Trainer, METRICS_HEADER};
