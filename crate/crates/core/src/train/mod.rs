//! Training: optimizer, epoch engine, checkpointing, and gradient
//! verification.

mod checkpoint;
mod engine;
mod gradcheck;
mod optimizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use engine::{
    epoch_order, epoch_transform, write_train_log, write_val_log, LrSchedule, StepRecord,
    TrainConfig, Trainer, ValRecord,
};
pub use gradcheck::{
    gradient_check, parameter_group, GradCheckOptions, GradCheckReport, GroupReport,
};
pub use optimizer::{decays, AdamW};
