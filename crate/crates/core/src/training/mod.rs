//! Optimization loop, losses and split protocols.

pub mod adam;
pub mod loss;
pub mod splits;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{mse_loss, mse_value};
pub use splits::{make_case_study_splits, split_counts, split_indices, CaseStudy, CaseStudySplits};
pub use trainer::{read_metrics, RunConfig, StepRecord, TrainConfig, TrainData, TrainOutput, Trainer};
