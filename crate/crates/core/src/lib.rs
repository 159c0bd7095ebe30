//! Semi-supervised wafer-map defect classification: a Mean Teacher training
//! loop with a supervised contrastive term, SMOTE rebalancing, a synthetic
//! wafer generator and Table-style metric reporting.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod resample;
pub mod rng;
pub mod train;
pub mod verify;

pub use augment::{augment, AugmentPolicy};
pub use config::{MethodVariant, RunConfig};
pub use dataset::{
    encode_input, generate_synthetic_dataset, generate_synthetic_wafer, load_dataset, save_dataset,
    split_labeled_fraction, ClassLabel, Dataset, WaferMap, NUM_CLASSES,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_experiment_from_files, ExperimentOutcome};
pub use eval::{compute_metrics, confusion, render_report, ConfusionMatrix, MetricsReport, ReportStyle};
pub use losses::{LossBreakdown, LossConfig};
pub use model::checkpoint::Checkpoint;
pub use model::{ema_update, init_params, sgd_step, ModelConfig, ParamSet};
pub use resample::{balance_dataset, smote_oversample, undersample, ResamplePlan};
pub use train::{evaluate_checkpoint, train, TrainConfig, TrainHistory};
