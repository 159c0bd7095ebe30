//! End-to-end run driven by a [`RunConfig`]: load data, optionally split and
//! rebalance, train, and write history, checkpoints and the final report.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::{load_dataset, split_labeled_fraction, Dataset};
use crate::error::{Error, Result};
use crate::eval::{report_to_kv, MetricsReport};
use crate::model::checkpoint::Checkpoint;
use crate::resample::balance_dataset;
use crate::train::{train_observed, EpochRecord, TrainObserver, TrainOutcome, TrainState};

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const REPORT_FILE: &str = "report.txt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.ckpt")
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub train: TrainOutcome,
    pub final_report: Option<MetricsReport>,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
}

/// Datasets after loading, splitting and rebalancing.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub val: Dataset,
}

/// Loads everything the variant needs through `loader`. Variants that do
/// not train on unlabeled data never touch the unlabeled file.
pub fn prepare_data(
    config: &RunConfig,
    loader: &mut dyn FnMut(&Path) -> Result<Dataset>,
) -> Result<PreparedData> {
    config.validate()?;
    let full = loader(&config.labeled)?;
    let val = loader(&config.val)?;
    val.require_labeled()?;

    let (labeled, split_rest) = match config.labeled_fraction {
        Some(f) => split_labeled_fraction(&full, f, config.split_seed)?,
        None => {
            full.require_labeled()?;
            (full, Dataset::new())
        }
    };

    let unlabeled = if config.variant.uses_unlabeled() {
        let mut pool = split_rest.into_records();
        if let Some(path) = &config.unlabeled {
            pool.extend(loader(path)?.into_records().into_iter().map(|r| r.with_label(None)));
        }
        Dataset::from_records(pool)?
    } else {
        Dataset::new()
    };

    let labeled = match &config.resample {
        Some(plan) => balance_dataset(&labeled, plan)?,
        None => labeled,
    };
    Ok(PreparedData {
        labeled,
        unlabeled,
        val,
    })
}

struct CheckpointWriter<'a> {
    dir: &'a Path,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_epoch(&mut self, state: &TrainState<'_>, record: &EpochRecord, validated: bool) -> Result<()> {
        if validated {
            snapshot(state).save(self.dir.join(epoch_checkpoint_name(record.epoch)))?;
        }
        Ok(())
    }
}

fn snapshot(state: &TrainState<'_>) -> Checkpoint {
    Checkpoint {
        student: state.student.clone(),
        teacher: state.teacher.clone(),
        velocity: state.velocity.clone(),
        step: state.step,
    }
}

/// Runs one configured experiment. With an output directory, writes the
/// history CSV, a checkpoint per validation epoch, the final checkpoint and
/// a key=value report; nothing is written if loading fails.
pub fn run_experiment(
    config: &RunConfig,
    loader: &mut dyn FnMut(&Path) -> Result<Dataset>,
) -> Result<ExperimentOutcome> {
    let data = prepare_data(config, loader)?;
    let train_cfg = config.effective_train_config();
    log::info!(
        "{}: {} labeled, {} unlabeled, {} validation records",
        config.variant,
        data.labeled.len(),
        data.unlabeled.len(),
        data.val.len()
    );

    let outcome = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut writer = CheckpointWriter { dir };
            train_observed(&data.labeled, &data.unlabeled, &data.val, &config.model, &train_cfg, &mut writer)?
        }
        None => train_observed(&data.labeled, &data.unlabeled, &data.val, &config.model, &train_cfg, &mut ())?,
    };
    let final_report = outcome.history.last_validation().cloned();

    if let Some(dir) = &config.out_dir {
        write_file(&dir.join(HISTORY_FILE), &outcome.history.to_csv())?;
        Checkpoint {
            student: outcome.student.clone(),
            teacher: outcome.teacher.clone(),
            velocity: outcome.velocity.clone(),
            step: outcome.step,
        }
        .save(dir.join(FINAL_CHECKPOINT))?;
        if let Some(r) = &final_report {
            write_file(&dir.join(REPORT_FILE), &report_to_kv(r))?;
        }
    }
    Ok(ExperimentOutcome {
        labeled_count: data.labeled.len(),
        unlabeled_count: data.unlabeled.len(),
        train: outcome,
        final_report,
    })
}

/// [`run_experiment`] reading datasets from disk.
pub fn run_experiment_from_files(config: &RunConfig) -> Result<ExperimentOutcome> {
    run_experiment(config, &mut |p: &Path| load_dataset(p))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
