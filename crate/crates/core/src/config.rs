//! Flat `key = value` run configuration. Unknown keys, duplicates and
//! malformed values are rejected before any compute starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::resample::ResamplePlan;
use crate::train::TrainConfig;

/// The four ablation variants. They share one training path and differ only
/// in which loss weights are forced to zero and whether unlabeled data is
/// used at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodVariant {
    Baseline,
    MeanTeacher,
    SupCon,
    MeanTeacherSupCon,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 4] = [
        MethodVariant::Baseline,
        MethodVariant::MeanTeacher,
        MethodVariant::SupCon,
        MethodVariant::MeanTeacherSupCon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodVariant::Baseline => "baseline",
            MethodVariant::MeanTeacher => "mean_teacher",
            MethodVariant::SupCon => "supcon",
            MethodVariant::MeanTeacherSupCon => "mean_teacher_supcon",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, MethodVariant::MeanTeacher | MethodVariant::MeanTeacherSupCon)
    }

    pub fn uses_supcon(self) -> bool {
        matches!(self, MethodVariant::SupCon | MethodVariant::MeanTeacherSupCon)
    }

    /// Zeroes the loss weights this variant does not train with.
    pub fn mask_losses(self, loss: &LossConfig) -> LossConfig {
        let mut out = *loss;
        if !self.uses_unlabeled() {
            out.consistency_weight_max = 0.0;
        }
        if !self.uses_supcon() {
            out.supcon_weight = 0.0;
        }
        out
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: MethodVariant,
    pub labeled: PathBuf,
    pub unlabeled: Option<PathBuf>,
    pub val: PathBuf,
    pub out_dir: Option<PathBuf>,
    /// Split the labeled file: this fraction keeps labels, the rest joins
    /// the unlabeled pool.
    pub labeled_fraction: Option<f64>,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Rebalance the labeled set before training.
    pub resample: Option<ResamplePlan>,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "variant",
    "labeled",
    "unlabeled",
    "val",
    "out_dir",
    "labeled_fraction",
    "split_seed",
    "seed",
    "input_height",
    "input_width",
    "stem_channels",
    "blocks",
    "embed_dim",
    "proj_dim",
    "epochs",
    "batch_labeled",
    "batch_unlabeled",
    "lr",
    "momentum",
    "ema_alpha",
    "eval_every",
    "augment_teacher",
    "consistency_on_labeled",
    "temperature",
    "consistency_weight",
    "supcon_weight",
    "classification_weight",
    "include_anchor_in_denominator",
    "rampup_steps",
    "rotate_90s",
    "flip",
    "die_noise_rate",
    "resample_target",
    "smote_k",
    "resample_seed",
    "allow_k_clamp",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::ConfigInvalid(format!("bad value `{raw}` for `{key}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::ConfigInvalid(format!("bad boolean `{raw}` for `{key}`"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::ConfigInvalid(format!("unknown key `{k}` on line {}", i + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::ConfigInvalid(format!("duplicate key `{k}` on line {}", i + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    /// Builds a config from text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let mut take = |k: &str| kv.remove(k);
        let path = |v: String| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let required = |k: &str, v: Option<String>| {
            v.ok_or_else(|| Error::ConfigInvalid(format!("missing required key `{k}`")))
        };

        let variant: MethodVariant = required("variant", take("variant"))?.parse()?;
        let labeled = path(required("labeled", take("labeled"))?);
        let val = path(required("val", take("val"))?);
        let unlabeled = take("unlabeled").map(path);
        let out_dir = take("out_dir").map(path);

        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut loss = LossConfig::default();
        let mut aug = AugmentPolicy::default();

        macro_rules! set {
            ($key:literal, $target:expr) => {
                if let Some(v) = take($key) {
                    $target = parse_value($key, &v)?;
                }
            };
        }
        macro_rules! set_bool {
            ($key:literal, $target:expr) => {
                if let Some(v) = take($key) {
                    $target = parse_bool($key, &v)?;
                }
            };
        }

        let mut labeled_fraction: Option<f64> = None;
        if let Some(v) = take("labeled_fraction") {
            labeled_fraction = Some(parse_value("labeled_fraction", &v)?);
        }
        let mut split_seed = 0u64;
        set!("split_seed", split_seed);
        set!("seed", train.seed);
        set!("input_height", model.input_height);
        set!("input_width", model.input_width);
        set!("stem_channels", model.stem_channels);
        set!("blocks", model.blocks);
        set!("embed_dim", model.embed_dim);
        set!("proj_dim", model.proj_dim);
        set!("epochs", train.epochs);
        set!("batch_labeled", train.batch_labeled);
        set!("batch_unlabeled", train.batch_unlabeled);
        set!("lr", train.lr);
        set!("momentum", train.momentum);
        set!("ema_alpha", train.ema_alpha);
        set!("eval_every", train.eval_every);
        set_bool!("augment_teacher", train.augment_teacher);
        set_bool!("consistency_on_labeled", train.consistency_on_labeled);
        set!("temperature", loss.temperature);
        set!("consistency_weight", loss.consistency_weight_max);
        set!("supcon_weight", loss.supcon_weight);
        set!("classification_weight", loss.classification_weight);
        set_bool!("include_anchor_in_denominator", loss.include_anchor_in_denominator);
        set!("rampup_steps", loss.rampup_steps);
        set_bool!("rotate_90s", aug.rotate_90s);
        set_bool!("flip", aug.flip);
        set!("die_noise_rate", aug.die_noise_rate);
        train.loss = loss;
        train.augment = aug;

        let resample = match take("resample_target") {
            Some(t) => {
                let mut plan = ResamplePlan::new(parse_value("resample_target", &t)?, 0);
                set!("smote_k", plan.smote_k);
                set!("resample_seed", plan.seed);
                set_bool!("allow_k_clamp", plan.allow_k_clamp);
                Some(plan)
            }
            None => {
                for k in ["smote_k", "resample_seed", "allow_k_clamp"] {
                    if take(k).is_some() {
                        return Err(Error::ConfigInvalid(format!("`{k}` requires `resample_target`")));
                    }
                }
                None
            }
        };
        debug_assert!(kv.is_empty(), "unhandled keys: {kv:?}");

        let cfg = RunConfig {
            variant,
            labeled,
            unlabeled,
            val,
            out_dir,
            labeled_fraction,
            split_seed,
            model,
            train,
            resample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::ConfigInvalid(format!("labeled_fraction {f} outside (0, 1]")));
            }
        }
        if let Some(plan) = &self.resample {
            plan.validate()?;
        }
        Ok(())
    }

    /// Points every seeded choice (split, resampling, training) at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.train.seed = seed;
        if let Some(plan) = &mut self.resample {
            plan.seed = seed;
        }
    }

    /// Training config with this variant's loss weights applied.
    pub fn effective_train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.loss = self.variant.mask_losses(&self.train.loss);
        t
    }
}
