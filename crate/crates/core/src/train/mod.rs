//! Optimisation, checkpoints, evaluation and experiment drivers.

mod adam;
mod checkpoint;
mod experiments;
mod trainer;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use experiments::{
    ablation_csv, export_condition_offsets, robustness_rows, run_ablation, run_robustness, AblationRow,
    AblationRun, Condition, RobustnessRow, RobustnessTable, ABLATION_CSV_HEADER, ABLATION_FLAGS,
    ROBUSTNESS_CSV_HEADER,
};
pub use trainer::{
    evaluate, evaluate_logits, fit, predict_dataset, predicted_masks, train, train_step, LogRow, TrainLog,
    TrainOutcome, LOG_CSV_HEADER,
};
