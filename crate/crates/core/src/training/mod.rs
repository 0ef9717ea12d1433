//! Optimisation: Adam, the batch-doubling schedule, the epoch loop and
//! checkpoint files.

mod adam;
mod checkpoint;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TensorRecord};
pub use schedule::{batch_schedule, default_milestones};
pub use trainer::{MetricsRecord, Mode, TrainConfig, Trainer};
