//! Adam, the training loop, grid search and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod trainer;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, restore_model, save_checkpoint, Checkpoint, LoadReport};
pub use config::{parse_override, Protocol, SplitConfig, TrainConfig};
pub use grid::{grid_search, select_best, GridPoint, GridResult, GridSpec};
pub use trainer::{
    accuracy, fit, freeze_backbones, initial_state, prepare_run, prepare_run_with, train, train_step, EpochRecord,
    RunData, TrainOutcome, TrainState,
};
