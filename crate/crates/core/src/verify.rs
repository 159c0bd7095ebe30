//! Self-checks against independent references: finite-difference gradients,
//! a naive contrastive-loss oracle, the closed-form EMA law and brute-force
//! SMOTE neighborhoods. A sign-flip fault can be injected into the
//! implementation side of every comparison to prove the checks can fail.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::dataset::{generate_synthetic_dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{
    build_mask, consistency_loss, softmax_cross_entropy, supcon_loss, supcon_loss_masked, LossConfig,
};
use crate::model::{backward, ema_update, forward, init_params, ModelConfig, OutputGrads, ParamSet};
use crate::resample::{balance_dataset, knn_indices, smote_oversample, ResamplePlan};
use crate::rng::{derive_seed, rng_from, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const MODEL_GRAD_TOL: f64 = 1e-4;
pub const LOSS_GRAD_TOL: f64 = 1e-6;
/// Denominator floor of the relative error. Entries smaller than this are
/// judged by absolute error; at `FD_STEP` the rounding noise of a central
/// difference of an O(1) objective is about 1e-10.
pub const REL_ERR_FLOOR: f64 = 1e-3;
/// Steps used, in turn, to re-probe a coordinate whose one-sided slopes
/// disagree, i.e. where a ReLU kink lies within the current step.
pub const KINK_STEPS: [f64; 2] = [1e-6, 1e-7];
pub const SUPCON_ORACLE_TOL: f64 = 1e-9;
pub const SUPCON_ORACLE_BATCHES: usize = 100;
pub const EMA_TOL: f64 = 1e-12;
pub const EMA_ALPHA: f64 = 0.99;
pub const EMA_STEPS: [u64; 3] = [1, 10, 100];
pub const SMOTE_POINTS: usize = 1000;
pub const SMOTE_SEGMENT_TOL: f64 = 1e-9;
pub const KNN_CASES: usize = 50;
pub const KNN_MAX_INPUT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    SupCon,
    Ema,
    Smote,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradients, Suite::SupCon, Suite::Ema, Suite::Smote];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::SupCon => "supcon",
            Suite::Ema => "ema",
            Suite::Smote => "smote",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Negate the implementation's output before each comparison.
    pub inject_sign_flip: bool,
}

/// One comparison: the worst observed error against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            worst,
            tolerance,
            passed: worst.is_finite() && worst < tolerance,
        }
    }

    fn boolean(name: impl Into<String>, ok: bool) -> Self {
        Check {
            name: name.into(),
            worst: if ok { 0.0 } else { 1.0 },
            tolerance: 0.5,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "suite {}: {}\n",
            self.suite,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            out.push_str(&format!(
                "  {:<4} {:<46} worst {:.3e} (tolerance {:.0e})\n",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.worst,
                c.tolerance
            ));
        }
        out
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradients => gradient_checks(opts)?,
        Suite::SupCon => supcon_checks(opts)?,
        Suite::Ema => ema_checks(opts)?,
        Suite::Smote => smote_checks(opts)?,
    };
    Ok(SuiteReport { suite, checks })
}

pub fn run_all(suites: &[Suite], opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    suites.iter().map(|&s| run_suite(s, opts)).collect()
}

fn flip(opts: &VerifyOptions) -> f64 {
    if opts.inject_sign_flip {
        -1.0
    } else {
        1.0
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn max_fd_error(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gradient_check_model() -> ModelConfig {
    ModelConfig {
        input_height: 8,
        input_width: 8,
        stem_channels: 4,
        blocks: 1,
        embed_dim: 6,
        proj_dim: 4,
    }
}

/// Two blocks, so the downsampling path is exercised too.
pub fn gradient_check_model_pooled() -> ModelConfig {
    ModelConfig {
        stem_channels: 3,
        blocks: 2,
        ..gradient_check_model()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradientCheck {
    pub worst: f64,
    pub coordinates: usize,
    /// Coordinates whose one-sided slopes disagreed (a ReLU kink within the
    /// step, or strong curvature) and were re-probed with smaller steps.
    pub reprobed: usize,
}

/// Finite-difference check of every trainable parameter of a small network
/// under a random linear functional of all three outputs.
pub fn model_gradient_check(cfg: &ModelConfig, seed: u64, train: bool, sign: f64) -> Result<ModelGradientCheck> {
    let cfg = *cfg;
    let batch = 3;
    let mut rng = rng_from(derive_seed(seed, &[1, train as u64]));
    let mut params = init_params(&cfg, derive_seed(seed, &[2]))?;
    // non-trivial affine and running statistics
    for p in params.params_mut() {
        let noise = gaussian_vec(&mut rng, p.data.len());
        match p.kind {
            crate::model::ParamKind::Bias | crate::model::ParamKind::NormShift => {
                p.data.iter_mut().zip(&noise).for_each(|(v, n)| *v += 0.1 * n)
            }
            crate::model::ParamKind::NormScale => {
                p.data.iter_mut().zip(&noise).for_each(|(v, n)| *v += 0.2 * n)
            }
            crate::model::ParamKind::RunningMean => {
                p.data.iter_mut().zip(&noise).for_each(|(v, n)| *v = 0.1 * n)
            }
            crate::model::ParamKind::RunningVar => {
                p.data.iter_mut().zip(&noise).for_each(|(v, n)| *v = 1.0 + 0.3 * n.abs())
            }
            crate::model::ParamKind::Weight => {}
        }
    }
    let inputs = gaussian_vec(&mut rng, batch * cfg.input_len());
    let we = gaussian_vec(&mut rng, batch * cfg.embed_dim);
    let wp = gaussian_vec(&mut rng, batch * cfg.proj_dim);
    let wl = gaussian_vec(&mut rng, batch * NUM_CLASSES);
    let objective = |p: &ParamSet| -> Result<f64> {
        let (out, _) = forward(p, &inputs, batch, train)?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        Ok(dot(&out.embeddings, &we) + dot(&out.projections, &wp) + dot(&out.logits, &wl))
    };

    let (_, cache) = forward(&params, &inputs, batch, train)?;
    let grads = backward(
        &params,
        &cache,
        &OutputGrads {
            embeddings: Some(we.clone()),
            projections: Some(wp.clone()),
            logits: Some(wl.clone()),
        },
    )?;

    let f0 = objective(&params)?;
    let mut report = ModelGradientCheck {
        worst: 0.0,
        coordinates: 0,
        reprobed: 0,
    };
    for t in 0..params.params().len() {
        if !params.params()[t].kind.trainable() {
            continue;
        }
        let analytic: Vec<f64> = grads.params()[t].data.iter().map(|g| sign * g).collect();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.params()[t].data[i];
            let mut probe = |h: f64| -> Result<(f64, f64)> {
                params.params_mut()[t].data[i] = orig + h;
                let up = objective(&params)?;
                params.params_mut()[t].data[i] = orig - h;
                let down = objective(&params)?;
                params.params_mut()[t].data[i] = orig;
                Ok((up, down))
            };
            let mut h = FD_STEP;
            let (mut up, mut down) = probe(h)?;
            let mut err = relative_error(a, (up - down) / (2.0 * h));
            let mut reprobed = false;
            for next in KINK_STEPS {
                let kinked = relative_error((up - f0) / h, (f0 - down) / h) > MODEL_GRAD_TOL;
                if !kinked {
                    break;
                }
                reprobed = true;
                h = next;
                (up, down) = probe(h)?;
                err = relative_error(a, (up - down) / (2.0 * h));
            }
            report.reprobed += reprobed as usize;
            report.worst = report.worst.max(err);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Finite-difference check of the cross-entropy, consistency and contrastive
/// loss gradients on random inputs; returns the worst relative error.
pub fn loss_gradient_error(seed: u64, sign: f64) -> Result<f64> {
    let mut rng = rng_from(derive_seed(seed, &[3]));
    let mut worst = 0.0f64;
    for trial in 0..5u64 {
        let b = 2 + trial as usize;
        let logits = gaussian_vec(&mut rng, b * NUM_CLASSES);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        let (_, g) = softmax_cross_entropy(&logits, &labels)?;
        let g: Vec<f64> = g.iter().map(|v| sign * v).collect();
        worst = worst.max(max_fd_error(&logits, &g, |x| Ok(softmax_cross_entropy(x, &labels)?.0))?);

        let teacher = gaussian_vec(&mut rng, b * NUM_CLASSES);
        let (_, g) = consistency_loss(&logits, &teacher)?;
        let g: Vec<f64> = g.iter().map(|v| sign * v).collect();
        worst = worst.max(max_fd_error(&logits, &g, |x| Ok(consistency_loss(x, &teacher)?.0))?);

        let dim = 3 + trial as usize;
        let proj = gaussian_vec(&mut rng, b * dim);
        let groups: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
        for include in [false, true] {
            let cfg = LossConfig {
                include_anchor_in_denominator: include,
                ..LossConfig::default()
            };
            let (_, g) = supcon_loss(&proj, dim, &groups, &cfg)?;
            let g: Vec<f64> = g.iter().map(|v| sign * v).collect();
            worst = worst.max(max_fd_error(&proj, &g, |x| Ok(supcon_loss(x, dim, &groups, &cfg)?.0))?);
        }
    }
    Ok(worst)
}

fn gradient_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let s = flip(opts);
    let mut checks = Vec::new();
    let cases = [
        ("model backward, batch statistics", gradient_check_model(), true),
        ("model backward, running statistics", gradient_check_model(), false),
        ("model backward, two blocks", gradient_check_model_pooled(), true),
    ];
    for (name, cfg, train) in cases {
        let r = model_gradient_check(&cfg, opts.seed, train, s)?;
        checks.push(Check::new(
            format!("{name} ({} re-probed)", r.reprobed),
            r.worst,
            MODEL_GRAD_TOL,
        ));
    }
    checks.push(Check::new("loss gradients", loss_gradient_error(opts.seed, s)?, LOSS_GRAD_TOL));
    Ok(checks)
}

/// Direct evaluation of the supervised contrastive loss from its
/// definition, one anchor and one positive at a time.
pub fn supcon_reference(proj: &[f64], dim: usize, labels: &[usize], tau: f64, include_anchor: bool) -> f64 {
    let b = labels.len();
    let z: Vec<Vec<f64>> = proj
        .chunks(dim)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let dot = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let mut denom = 0.0;
        for a in 0..b {
            if a != i || include_anchor {
                denom += (dot(i, a) / tau).exp();
            }
        }
        let mut sum = 0.0;
        let mut count = 0;
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                sum += ((dot(i, p) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += -sum / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Worst absolute difference between the implementation and the reference
/// over random batches, with and without the anchor in the denominator.
pub fn supcon_oracle_error(seed: u64, batches: usize, sign: f64) -> Result<f64> {
    let mut rng = rng_from(derive_seed(seed, &[4]));
    let mut worst = 0.0f64;
    for n in 0..batches {
        let b = rng.gen_range(2..=16);
        let dim = rng.gen_range(2..=8);
        let classes = rng.gen_range(1..=5);
        let tau = [0.07, 0.1, 0.5, 1.0][n % 4];
        let include = n % 2 == 1;
        let proj = gaussian_vec(&mut rng, b * dim);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let cfg = LossConfig {
            temperature: tau,
            include_anchor_in_denominator: include,
            ..LossConfig::default()
        };
        let (got, _) = supcon_loss(&proj, dim, &labels, &cfg)?;
        let want = supcon_reference(&proj, dim, &labels, tau, include);
        worst = worst.max((sign * got - want).abs());
    }
    Ok(worst)
}

fn supcon_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let s = flip(opts);
    let cfg = LossConfig::default();
    let mut rng = rng_from(derive_seed(opts.seed, &[5]));
    let proj = gaussian_vec(&mut rng, 6 * 4);

    let distinct: Vec<usize> = (0..6).collect();
    let (no_positives, _) = supcon_loss(&proj, 4, &distinct, &cfg)?;
    let (identity_mask, _) = supcon_loss_masked(&proj, 4, &build_mask(None, 6), &cfg)?;
    let same = [0usize; 6];
    let (all_same, _) = supcon_loss(&proj, 4, &same, &cfg)?;
    let (pair, _) = supcon_loss(&proj[..8], 4, &[3, 3], &cfg)?;
    let want_same = supcon_reference(&proj, 4, &same, cfg.temperature, false);

    Ok(vec![
        Check::new(
            format!("{SUPCON_ORACLE_BATCHES} random batches vs reference"),
            supcon_oracle_error(opts.seed, SUPCON_ORACLE_BATCHES, s)?,
            SUPCON_ORACLE_TOL,
        ),
        Check::new("all labels distinct gives zero", (s * no_positives).abs(), SUPCON_ORACLE_TOL),
        Check::new("identity mask gives zero", (s * identity_mask).abs(), SUPCON_ORACLE_TOL),
        Check::boolean("two records, same label, gives exactly zero", s * pair == 0.0),
        Check::new("all labels equal vs reference", (s * all_same - want_same).abs(), SUPCON_ORACLE_TOL),
        Check::boolean("zero-norm projection rejected", {
            let mut z = proj.clone();
            z[..4].iter_mut().for_each(|v| *v = 0.0);
            supcon_loss(&z, 4, &same, &cfg).is_err()
        }),
    ])
}

/// Repeated EMA toward a fixed student versus the closed form
/// `alpha^t T0 + (1 - alpha^t) S`; worst absolute deviation.
pub fn ema_law_error(seed: u64, steps: u64, alpha: f64, sign: f64) -> Result<f64> {
    let cfg = gradient_check_model();
    let t0 = init_params(&cfg, derive_seed(seed, &[6, 0]))?;
    let mut student = init_params(&cfg, derive_seed(seed, &[6, 1]))?;
    let mut rng = rng_from(derive_seed(seed, &[6, 2]));
    for p in student.params_mut() {
        let noise = gaussian_vec(&mut rng, p.data.len());
        p.data.iter_mut().zip(&noise).for_each(|(v, n)| *v += n);
    }
    let mut teacher = t0.clone();
    for _ in 0..steps {
        ema_update(&mut teacher, &student, alpha)?;
    }
    let at = alpha.powi(steps as i32);
    let mut worst = 0.0f64;
    for ((t, a), s) in teacher.params().iter().zip(t0.params()).zip(student.params()) {
        for ((&tv, &av), &sv) in t.data.iter().zip(&a.data).zip(&s.data) {
            let want = at * av + (1.0 - at) * sv;
            worst = worst.max((sign * tv - want).abs());
        }
    }
    Ok(worst)
}

fn ema_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let s = flip(opts);
    let mut checks = Vec::new();
    for t in EMA_STEPS {
        checks.push(Check::new(
            format!("closed form after {t} steps"),
            ema_law_error(opts.seed, t, EMA_ALPHA, s)?,
            EMA_TOL,
        ));
    }
    for alpha in [0.0, 1.0] {
        checks.push(Check::new(
            format!("endpoint alpha = {alpha}"),
            ema_law_error(opts.seed, 3, alpha, s)?,
            EMA_TOL,
        ));
    }
    Ok(checks)
}

/// Neighbors by exhaustive sort on (distance, index).
pub fn brute_force_knn(samples: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..samples.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..samples.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = samples[i].iter().zip(&samples[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Distance from `x` to the closest segment between a sample and one of its
/// `k` nearest neighbors.
fn distance_to_smote_segments(x: &[f64], samples: &[Vec<f64>], neighbors: &[Vec<usize>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, nn) in neighbors.iter().enumerate() {
        let a = &samples[i];
        for &j in nn {
            let b = &samples[j];
            let ab: f64 = a.iter().zip(b).map(|(p, q)| (q - p) * (q - p)).sum();
            let ax: f64 = a.iter().zip(b).zip(x).map(|((p, q), v)| (q - p) * (v - p)).sum();
            let t = if ab > 0.0 { (ax / ab).clamp(0.0, 1.0) } else { 0.0 };
            let d: f64 = a
                .iter()
                .zip(b)
                .zip(x)
                .map(|((p, q), v)| {
                    let proj = p + t * (q - p);
                    (v - proj) * (v - proj)
                })
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Worst distance of a synthetic point from the SMOTE segments of its class.
pub fn smote_segment_error(seed: u64, points: usize, sign: f64) -> Result<f64> {
    let mut rng = rng_from(derive_seed(seed, &[7]));
    let k = 5;
    // two well separated 2-D clusters; SMOTE runs on each separately
    let mut worst = 0.0f64;
    for (c, center) in [(-4.0, 1.0), (3.0, -2.0)].into_iter().enumerate() {
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let g = gaussian_vec(&mut rng, 2);
                vec![center.0 + g[0], center.1 + 0.5 * g[1]]
            })
            .collect();
        let synth = smote_oversample(&samples, points / 2, k, derive_seed(seed, &[8, c as u64]))?;
        let neighbors = brute_force_knn(&samples, k);
        for x in &synth {
            let x: Vec<f64> = x.iter().map(|v| sign * v).collect();
            worst = worst.max(distance_to_smote_segments(&x, &samples, &neighbors));
        }
    }
    Ok(worst)
}

/// Number of random inputs on which the heap-based neighbor search
/// disagrees with the exhaustive one. Coordinates are coarsely quantized so
/// that distance ties occur.
pub fn knn_mismatches(seed: u64, cases: usize, sign: f64) -> usize {
    let mut rng = rng_from(derive_seed(seed, &[9]));
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=KNN_MAX_INPUT);
        let dim = rng.gen_range(1..=4);
        let k = rng.gen_range(1..n);
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(0..4) as f64).collect())
            .collect();
        let mut got = knn_indices(&samples, k);
        if sign < 0.0 {
            got.iter_mut().for_each(|r| r.reverse());
        }
        if got != brute_force_knn(&samples, k) {
            bad += 1;
        }
    }
    bad
}

fn smote_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let s = flip(opts);
    let mismatches = knn_mismatches(opts.seed, KNN_CASES, s);

    let counts = [30, 8, 12, 6, 45, 7, 20, 9, 60];
    let ds = generate_synthetic_dataset(&counts, 16, 16, derive_seed(opts.seed, &[10]), 0.05)?;
    let plan = ResamplePlan::new(20, opts.seed);
    let balanced = balance_dataset(&ds, &plan)?;
    let uniform = balanced.counts_per_class().iter().all(|&c| c == 20)
        && balanced.records().iter().all(|r| r.grid().iter().all(|&v| v <= 2));

    Ok(vec![
        Check::new(
            format!("{SMOTE_POINTS} synthetic points on neighbor segments"),
            smote_segment_error(opts.seed, SMOTE_POINTS, s)?,
            SMOTE_SEGMENT_TOL,
        ),
        Check::new(
            format!("neighbor search vs exhaustive, {KNN_CASES} inputs"),
            mismatches as f64,
            0.5,
        ),
        Check::boolean("rebalanced counts uniform and valid", uniform),
    ])
}
