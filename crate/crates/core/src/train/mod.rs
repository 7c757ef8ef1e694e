//! Optimizer, learning-rate schedule, training loop and evaluation.

mod ablation;
mod adam;
mod eval;
mod schedule;
mod trainer;

pub use ablation::{run_ablation, AblationRow, AblationSummary, AblationTable, Arm};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, evaluate_with};
pub use schedule::Schedule;
pub use trainer::{read_trace, TraceRecord, TraceWriter, TrainConfig, TrainState, Trainer};
