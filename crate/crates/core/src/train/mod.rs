//! Loss, optimizer, schedule, checkpointing, and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod run;

pub use checkpoint::{average_checkpoints, Checkpoint};
pub use loss::{l2_penalty, label_smoothed_cross_entropy};
pub use optim::{adam_step, lr_schedule, AdamHyper, OptimState};
pub use run::{
    ablate_compare, metrics_to_csv, parse_full_config, set_ablation, token_accuracy, train_loop,
    AblationRow, MetricsRow, StepObservation, TrainConfig, TrainResult,
};
