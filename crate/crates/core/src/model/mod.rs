//! Compact residual classifier with a projection head, trained by hand-written
//! backpropagation, plus the SGD optimizer and the EMA teacher update.

pub mod checkpoint;
mod network;
pub mod ops;

use rand::Rng as _;

use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub use network::{backward, forward, update_running_stats, BatchOutput, ForwardCache, OutputGrads};

/// Momentum of the normalization running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 32,
            input_width: 32,
            stem_channels: 16,
            blocks: 2,
            embed_dim: 64,
            proj_dim: 32,
        }
    }
}

impl ModelConfig {
    pub const IN_CHANNELS: usize = 3;
    pub const NUM_CLASSES: usize = NUM_CLASSES;

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_height,
            self.input_width,
            self.stem_channels,
            self.blocks,
            self.embed_dim,
            self.proj_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::ConfigInvalid(format!("model dimensions must be positive: {self:?}")));
        }
        let shrink = 1usize << (self.blocks - 1);
        if self.input_height < shrink || self.input_width < shrink {
            return Err(Error::ConfigInvalid(format!(
                "{}x{} input is too small for {} blocks",
                self.input_height, self.input_width, self.blocks
            )));
        }
        Ok(())
    }

    /// Elements in one input sample.
    pub fn input_len(&self) -> usize {
        Self::IN_CHANNELS * self.input_height * self.input_width
    }
}

/// Role of a parameter tensor; running statistics are averaged by the EMA
/// but never touched by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn parse(s: &str) -> Option<ParamKind> {
        [
            ParamKind::Weight,
            ParamKind::Bias,
            ParamKind::NormScale,
            ParamKind::NormShift,
            ParamKind::RunningMean,
            ParamKind::RunningVar,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// Fan-in of a weight tensor (all dims after the first).
    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Named parameter tensors of one network, in a fixed order determined by
/// the config. Gradients and optimizer velocity reuse the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    params: Vec<Param>,
}

pub type ParamGrads = ParamSet;

/// Position of each tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormSlots {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockSlots {
    pub conv1: usize,
    pub bn1: NormSlots,
    pub conv2: usize,
    pub bn2: NormSlots,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub stem_conv: usize,
    pub stem_bn: NormSlots,
    pub blocks: Vec<BlockSlots>,
    pub embed_w: usize,
    pub embed_b: usize,
    pub proj1_w: usize,
    pub proj1_b: usize,
    pub proj2_w: usize,
    pub proj2_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

struct LayoutBuilder {
    params: Vec<Param>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, kind: ParamKind, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        let fill = match kind {
            ParamKind::NormScale | ParamKind::RunningVar => 1.0,
            _ => 0.0,
        };
        self.params.push(Param {
            name,
            kind,
            shape,
            data: vec![fill; n],
        });
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormSlots {
        NormSlots {
            gamma: self.add(format!("{prefix}.gamma"), ParamKind::NormScale, vec![c]),
            beta: self.add(format!("{prefix}.beta"), ParamKind::NormShift, vec![c]),
            mean: self.add(format!("{prefix}.running_mean"), ParamKind::RunningMean, vec![c]),
            var: self.add(format!("{prefix}.running_var"), ParamKind::RunningVar, vec![c]),
        }
    }

    fn linear(&mut self, prefix: &str, nout: usize, nin: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.weight"), ParamKind::Weight, vec![nout, nin]),
            self.add(format!("{prefix}.bias"), ParamKind::Bias, vec![nout]),
        )
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<Param>) {
    let c = config.stem_channels;
    let mut b = LayoutBuilder { params: Vec::new() };
    let stem_conv = b.add("stem.conv.weight".into(), ParamKind::Weight, vec![c, 3, 3, 3]);
    let stem_bn = b.norm("stem.bn", c);
    let blocks = (0..config.blocks)
        .map(|i| BlockSlots {
            conv1: b.add(format!("block{i}.conv1.weight"), ParamKind::Weight, vec![c, c, 3, 3]),
            bn1: b.norm(&format!("block{i}.bn1"), c),
            conv2: b.add(format!("block{i}.conv2.weight"), ParamKind::Weight, vec![c, c, 3, 3]),
            bn2: b.norm(&format!("block{i}.bn2"), c),
        })
        .collect();
    let (embed_w, embed_b) = b.linear("embed", config.embed_dim, c);
    let (proj1_w, proj1_b) = b.linear("proj1", config.embed_dim, config.embed_dim);
    let (proj2_w, proj2_b) = b.linear("proj2", config.proj_dim, config.embed_dim);
    let (head_w, head_b) = b.linear("head", NUM_CLASSES, config.embed_dim);
    (
        Layout {
            stem_conv,
            stem_bn,
            blocks,
            embed_w,
            embed_b,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
            head_w,
            head_b,
        },
        b.params,
    )
}

pub(crate) fn layout(config: &ModelConfig) -> Layout {
    build_layout(config).0
}

impl ParamSet {
    /// Zero-initialised tensors, except normalization scales and running
    /// variances which start at one.
    pub fn identity_init(config: &ModelConfig) -> Self {
        ParamSet {
            config: *config,
            params: build_layout(config).1,
        }
    }

    /// All-zero tensors with the layout of `config` (gradient / velocity buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut p = Self::identity_init(config);
        p.params.iter_mut().for_each(|t| t.data.fill(0.0));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn data(&self, slot: usize) -> &[f64] {
        &self.params[slot].data
    }

    pub(crate) fn data_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.params[slot].data
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Multiplies every value by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.params
            .iter_mut()
            .for_each(|p| p.data.iter_mut().for_each(|v| *v *= factor));
    }

    /// Builds a set from explicit tensors; names, kinds and shapes must match
    /// the layout of `config` exactly.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        let reference = Self::identity_init(&config);
        reference.check_compatible_params(&params)?;
        Ok(ParamSet { config, params })
    }

    fn check_compatible_params(&self, other: &[Param]) -> Result<()> {
        if self.params.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors vs {}",
                self.params.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other) {
            if a.name != b.name || a.shape != b.shape || a.kind != b.kind {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
            if b.data.len() != b.shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("`{}` has wrong element count", b.name)));
            }
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ShapeMismatch("model configs differ".into()));
        }
        self.check_compatible_params(&other.params)
    }

    /// Order-sensitive digest of every value (FNV-1a over the bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in &p.data {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// He-uniform weights (variance `2 / fan_in`), zero biases and shifts, unit
/// scales; deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut set = ParamSet::identity_init(config);
    let mut rng = rng_from(seed);
    for p in set.params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
        let bound = (6.0 / p.fan_in() as f64).sqrt();
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
    }
    Ok(set)
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub ParamSet);

impl Velocity {
    pub fn zeros(config: &ModelConfig) -> Self {
        Velocity(ParamSet::zeros(config))
    }
}

/// Momentum SGD on trainable tensors: `v = momentum * v + g; p -= lr * v`.
/// Leaves everything untouched if any gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&velocity.0)?;
    if let Some(bad) = grads
        .params
        .iter()
        .find(|g| g.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    for ((p, g), v) in params
        .params
        .iter_mut()
        .zip(&grads.params)
        .zip(velocity.0.params.iter_mut())
    {
        if !p.kind.trainable() {
            continue;
        }
        for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Exponential moving average of every tensor, running statistics included:
/// `teacher = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::ConfigInvalid(format!("EMA decay {alpha} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    let keep = 1.0 - alpha;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = alpha * *tv + keep * sv;
        }
    }
    Ok(())
}
