//! Experiment harness: configuration, data, models, training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod model;
pub mod run;

pub use checkpoint::{checkpoint_load, checkpoint_save, TrainState};
pub use config::{
    load_config, parse_config, serialize_config, DatasetSpec, ExperimentConfig, Hyper, ModelSpec, OptimizerKind,
    PiGranularity,
};
pub use dataset::{load_dataset, synthetic_blobs, Dataset};
pub use model::{build_model, build_model_with, BuildOptions, Model};
pub use run::{prepare_data, run_experiment, RunOutcome, CHECKPOINT_FILE, METRICS_FILE, SCHEDULE_FILE};
