//! Mean Teacher training loop: mixed labeled/unlabeled batches, independent
//! augmentation per network, composite loss, SGD on the student and an EMA
//! update of the teacher after every step.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{augment, AugmentPolicy};
use crate::dataset::{encode_input_into, Dataset, WaferMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, confusion, MetricsReport};
use crate::losses::{
    consistency_loss, softmax_cross_entropy, supcon_loss, total_loss, LossBreakdown, LossConfig, LossTerms,
};
use crate::model::{
    backward, ema_update, forward, init_params, sgd_step, update_running_stats, ModelConfig, OutputGrads,
    ParamSet, Velocity,
};
use crate::rng::{derive_seed, rng_from};

// seed-derivation tags
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_UNLABELED: u64 = 3;
const TAG_STUDENT_VIEW: u64 = 4;
const TAG_TEACHER_VIEW: u64 = 5;

/// Records per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub ema_alpha: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    /// Draw an independent augmentation for the teacher view as well.
    pub augment_teacher: bool,
    /// Apply the consistency term to labeled records too, not only unlabeled.
    pub consistency_on_labeled: bool,
    /// Validation (and checkpoint) period in epochs; the last epoch is
    /// always validated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_labeled: 32,
            batch_unlabeled: 32,
            lr: 0.05,
            momentum: 0.9,
            ema_alpha: 0.99,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            augment_teacher: true,
            consistency_on_labeled: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigInvalid(m));
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return fail(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Per-epoch summary. `val` is present on validation epochs when a
/// validation set was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val: Option<MetricsReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,classification,consistency,supcontrast,total,val_accuracy,val_macro_precision,val_macro_recall,val_macro_f1";

impl TrainHistory {
    /// CSV with one row per epoch; validation columns are empty on epochs
    /// without validation. Wall-clock time is deliberately not included so
    /// that identical runs produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let l = &r.losses;
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.epoch, l.classification, l.consistency, l.supcontrast, l.total
            );
            match &r.val {
                Some(m) => {
                    let o = &m.overall;
                    let _ = writeln!(
                        out,
                        ",{},{},{},{}",
                        o.accuracy, o.macro_precision, o.macro_recall, o.macro_f1
                    );
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }

    pub fn last_validation(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find_map(|r| r.val.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub velocity: Velocity,
    pub step: u64,
    pub history: TrainHistory,
}

/// Snapshot handed to a [`TrainObserver`].
pub struct TrainState<'a> {
    pub student: &'a ParamSet,
    pub teacher: &'a ParamSet,
    pub velocity: &'a Velocity,
    pub step: u64,
}

/// Hooks into the training loop (checkpointing, logging, tests).
pub trait TrainObserver {
    fn on_step(&mut self, _state: &TrainState<'_>, _losses: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch; `validated` is true on validation epochs.
    fn on_epoch(&mut self, _state: &TrainState<'_>, _record: &EpochRecord, _validated: bool) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Trains student and teacher from scratch; see [`train_observed`].
pub fn train(
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(labeled, unlabeled, val, model_config, train_config, &mut ())
}

/// Cycles through a collection in freshly shuffled passes.
struct ShuffledStream {
    len: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl ShuffledStream {
    fn new(len: usize, seed: u64) -> Self {
        ShuffledStream {
            len,
            seed,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.len).collect();
            self.order
                .shuffle(&mut rng_from(derive_seed(self.seed, &[TAG_UNLABELED, self.pass])));
            self.pass += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn encode_batch(wafers: &[WaferMap], cfg: &ModelConfig) -> Result<Vec<f64>> {
    let n = cfg.input_len();
    let mut buf = vec![0.0; wafers.len() * n];
    for (w, chunk) in wafers.iter().zip(buf.chunks_exact_mut(n)) {
        encode_input_into(w, cfg.input_height, cfg.input_width, chunk)?;
    }
    Ok(buf)
}

/// Full training run. Each step: sample labeled and unlabeled records,
/// augment each independently for the student and teacher paths, compute
/// cross-entropy and supervised contrastive loss on labeled student outputs
/// and consistency between student and teacher class probabilities, step
/// the student with SGD, then move the teacher toward the student by EMA.
/// The teacher starts as a copy of the student and is what validation uses.
pub fn train_observed(
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let labels: Vec<usize> = labeled.labels()?.into_iter().map(|c| c.index()).collect();
    val.require_labeled()?;

    let mut student = init_params(model_config, derive_seed(cfg.seed, &[TAG_INIT]))?;
    let mut teacher = student.clone();
    let mut velocity = Velocity::zeros(model_config);
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;

    let n_lab = labeled.len();
    let bl = cfg.batch_labeled.min(n_lab);
    let bu = cfg.batch_unlabeled.min(unlabeled.len());
    let steps_per_epoch = n_lab.div_ceil(bl);
    let mut unlabeled_stream = ShuffledStream::new(unlabeled.len(), cfg.seed);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n_lab).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64])));
        let mut sums = LossBreakdown::default();

        for j in 0..steps_per_epoch {
            let lab_idx: Vec<usize> = (0..bl).map(|k| order[(j * bl + k) % n_lab]).collect();
            let unl_idx: Vec<usize> = (0..bu).map(|_| unlabeled_stream.next()).collect();
            let records: Vec<&WaferMap> = lab_idx
                .iter()
                .map(|&i| &labeled.records()[i])
                .chain(unl_idx.iter().map(|&i| &unlabeled.records()[i]))
                .collect();
            let batch_labels: Vec<usize> = lab_idx.iter().map(|&i| labels[i]).collect();

            let losses = train_step(
                &mut student,
                &mut teacher,
                &mut velocity,
                &records,
                &batch_labels,
                model_config,
                cfg,
                step,
            )?;
            step += 1;
            sums.classification += losses.classification;
            sums.consistency += losses.consistency;
            sums.supcontrast += losses.supcontrast;
            sums.total += losses.total;
            observer.on_step(
                &TrainState {
                    student: &student,
                    teacher: &teacher,
                    velocity: &velocity,
                    step,
                },
                &losses,
            )?;
        }

        let n = steps_per_epoch as f64;
        let validated = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val_report = if validated && !val.is_empty() {
            Some(evaluate_checkpoint(&teacher, val)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            losses: LossBreakdown {
                classification: sums.classification / n,
                consistency: sums.consistency / n,
                supcontrast: sums.supcontrast / n,
                total: sums.total / n,
            },
            val: val_report,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} total {:.4} (cls {:.4}, cons {:.4}, supcon {:.4}){}",
            record.epoch,
            record.losses.total,
            record.losses.classification,
            record.losses.consistency,
            record.losses.supcontrast,
            record
                .val
                .as_ref()
                .map(|m| format!(" val macro-F1 {:.4}", m.overall.macro_f1))
                .unwrap_or_default()
        );
        observer.on_epoch(
            &TrainState {
                student: &student,
                teacher: &teacher,
                velocity: &velocity,
                step,
            },
            &record,
            validated,
        )?;
        history.epochs.push(record);
    }

    Ok(TrainOutcome {
        student,
        teacher,
        velocity,
        step,
        history,
    })
}

/// One optimizer step. `records` holds the labeled records first, then the
/// unlabeled ones; `labels` covers the labeled prefix.
#[allow(clippy::too_many_arguments)]
fn train_step(
    student: &mut ParamSet,
    teacher: &mut ParamSet,
    velocity: &mut Velocity,
    records: &[&WaferMap],
    labels: &[usize],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let n = records.len();
    let nl = labels.len();
    let policy = &cfg.augment;

    let student_views: Vec<WaferMap> = records
        .iter()
        .enumerate()
        .map(|(slot, r)| augment(r, policy, derive_seed(cfg.seed, &[TAG_STUDENT_VIEW, step, slot as u64])))
        .collect();
    let inputs = encode_batch(&student_views, model_config)?;
    let (out, cache) = forward(student, &inputs, n, true)?;

    let mut terms = LossTerms::default();
    let mut dlogits = vec![0.0; n * NUM_CLASSES];
    let mut dproj: Option<Vec<f64>> = None;

    let (ce, ce_grad) = softmax_cross_entropy(&out.logits[..nl * NUM_CLASSES], labels)?;
    terms.classification = ce;
    let wc = cfg.loss.classification_weight;
    dlogits[..nl * NUM_CLASSES]
        .iter_mut()
        .zip(&ce_grad)
        .for_each(|(d, g)| *d += wc * g);

    let pd = model_config.proj_dim;
    if cfg.loss.supcon_weight > 0.0 && nl >= 2 {
        let (sc, sc_grad) = supcon_loss(&out.projections[..nl * pd], pd, labels, &cfg.loss)?;
        terms.supcontrast = sc;
        let ws = cfg.loss.supcon_weight;
        let mut g = vec![0.0; n * pd];
        g[..nl * pd].iter_mut().zip(&sc_grad).for_each(|(d, v)| *d = ws * v);
        dproj = Some(g);
    }

    // Zero-weight consistency is skipped entirely and reported as 0.
    let w_cons = cfg.loss.consistency_weight(step);
    let first = if cfg.consistency_on_labeled { 0 } else { nl };
    if w_cons > 0.0 && first < n {
        let teacher_views: Vec<WaferMap> = (first..n)
            .map(|slot| {
                if cfg.augment_teacher {
                    augment(records[slot], policy, derive_seed(cfg.seed, &[TAG_TEACHER_VIEW, step, slot as u64]))
                } else {
                    records[slot].clone()
                }
            })
            .collect();
        let t_inputs = encode_batch(&teacher_views, model_config)?;
        let (t_out, _) = forward(teacher, &t_inputs, n - first, true)?;
        let (cl, cl_grad) = consistency_loss(&out.logits[first * NUM_CLASSES..], &t_out.logits)?;
        terms.consistency = cl;
        dlogits[first * NUM_CLASSES..]
            .iter_mut()
            .zip(&cl_grad)
            .for_each(|(d, g)| *d += w_cons * g);
    }

    let breakdown = total_loss(&terms, &cfg.loss, step)?;
    let grads = backward(
        student,
        &cache,
        &OutputGrads {
            embeddings: None,
            projections: dproj,
            logits: Some(dlogits),
        },
    )?;
    sgd_step(student, &grads, cfg.lr, cfg.momentum, velocity)?;
    update_running_stats(student, &cache);
    ema_update(teacher, student, cfg.ema_alpha)?;
    Ok(breakdown)
}

/// Argmax class per record (ties go to the lower index), eval-mode forward.
pub fn predict(params: &ParamSet, records: &[WaferMap]) -> Result<Vec<usize>> {
    let cfg = *params.config();
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let inputs = encode_batch(chunk, &cfg)?;
        let (out, _) = forward(params, &inputs, chunk.len(), false)?;
        preds.extend(out.logits.chunks_exact(NUM_CLASSES).map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        }));
    }
    Ok(preds)
}

/// Eval-mode metrics of `params` on a fully labeled dataset.
pub fn evaluate_checkpoint(params: &ParamSet, dataset: &Dataset) -> Result<MetricsReport> {
    let truths: Vec<usize> = dataset.labels()?.into_iter().map(|c| c.index()).collect();
    let preds = if dataset.is_empty() {
        Vec::new()
    } else {
        predict(params, dataset.records())?
    };
    compute_metrics(&confusion(&preds, &truths)?)
}
