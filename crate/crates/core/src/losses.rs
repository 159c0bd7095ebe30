//! Loss terms and their gradients: softmax cross-entropy, student/teacher
//! consistency, and the supervised contrastive loss on normalized
//! projections.

use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};

/// Rows with a smaller Euclidean norm are rejected by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub consistency_weight_max: f64,
    pub supcon_weight: f64,
    pub classification_weight: f64,
    /// Keep the anchor itself in the contrastive denominator.
    pub include_anchor_in_denominator: bool,
    /// Sigmoid-shaped ramp of the consistency weight; 0 disables it.
    pub rampup_steps: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            consistency_weight_max: 1.0,
            supcon_weight: 1.0,
            classification_weight: 1.0,
            include_anchor_in_denominator: false,
            rampup_steps: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, w) in [
            ("consistency_weight", self.consistency_weight_max),
            ("supcon_weight", self.supcon_weight),
            ("classification_weight", self.classification_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::ConfigInvalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// `exp(-5 (1 - min(step / rampup, 1))^2)`, or 1 without ramp-up.
    pub fn ramp(&self, step: u64) -> f64 {
        if self.rampup_steps == 0 {
            return 1.0;
        }
        let t = (step as f64 / self.rampup_steps as f64).min(1.0);
        (-5.0 * (1.0 - t) * (1.0 - t)).exp()
    }

    pub fn consistency_weight(&self, step: u64) -> f64 {
        self.consistency_weight_max * self.ramp(step)
    }
}

/// Unweighted loss terms as computed on a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub classification: f64,
    pub consistency: f64,
    pub supcontrast: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub consistency: f64,
    pub supcontrast: f64,
    pub total: f64,
}

/// Weighted sum of the three terms with the ramped consistency weight.
pub fn total_loss(parts: &LossTerms, config: &LossConfig, step: u64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("classification", parts.classification),
        ("consistency", parts.consistency),
        ("supcontrast", parts.supcontrast),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    let total = config.classification_weight * parts.classification
        + config.consistency_weight(step) * parts.consistency
        + config.supcon_weight * parts.supcontrast;
    Ok(LossBreakdown {
        classification: parts.classification,
        consistency: parts.consistency,
        supcontrast: parts.supcontrast,
        total,
    })
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Row-wise softmax of `[batch, NUM_CLASSES]` logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (r, o) in logits.chunks_exact(NUM_CLASSES).zip(out.chunks_exact_mut(NUM_CLASSES)) {
        softmax_row(r, o);
    }
    out
}

fn check_logits(logits: &[f64], batch: usize) -> Result<()> {
    if logits.len() != batch * NUM_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for a batch of {batch}",
            logits.len()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels`; gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    check_logits(logits, batch)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::BadLabel(bad));
    }
    if batch == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_b = 1.0 / batch as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &y) in logits
        .chunks_exact(NUM_CLASSES)
        .zip(grad.chunks_exact_mut(NUM_CLASSES))
        .zip(labels)
    {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (gk, &v) in g.iter_mut().zip(row) {
            *gk = (v - lse).exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Mean squared difference of student and teacher class probabilities,
/// averaged over batch and classes. Only the student receives gradient.
pub fn consistency_loss(student_logits: &[f64], teacher_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if student_logits.len() != teacher_logits.len() || !student_logits.len().is_multiple_of(NUM_CLASSES) {
        return Err(Error::ShapeMismatch(format!(
            "student {} vs teacher {} logits",
            student_logits.len(),
            teacher_logits.len()
        )));
    }
    if student_logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let norm = 1.0 / student_logits.len() as f64;
    let ps = softmax(student_logits);
    let pt = softmax(teacher_logits);
    let mut grad = vec![0.0; ps.len()];
    let mut loss = 0.0;
    for ((s, t), g) in ps
        .chunks_exact(NUM_CLASSES)
        .zip(pt.chunks_exact(NUM_CLASSES))
        .zip(grad.chunks_exact_mut(NUM_CLASSES))
    {
        // dL/dp_j, then through the softmax Jacobian
        let dp: Vec<f64> = s.iter().zip(t).map(|(a, b)| 2.0 * (a - b) * norm).collect();
        loss += s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let dot: f64 = dp.iter().zip(s).map(|(d, p)| d * p).sum();
        for k in 0..NUM_CLASSES {
            g[k] = s[k] * (dp[k] - dot);
        }
    }
    Ok((loss * norm, grad))
}

/// Divides each `dim`-wide row by its Euclidean norm.
pub fn l2_normalize(vectors: &[f64], dim: usize) -> Result<Vec<f64>> {
    let (out, _) = normalize_with_norms(vectors, dim)?;
    Ok(out)
}

fn normalize_with_norms(vectors: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not form rows of width {dim}",
            vectors.len()
        )));
    }
    let mut out = vectors.to_vec();
    let mut norms = Vec::with_capacity(vectors.len() / dim);
    for (row, r) in out.chunks_exact_mut(dim).enumerate() {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n.is_nan() || n < MIN_NORM {
            return Err(Error::ZeroNorm { row });
        }
        r.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Square binary matrix marking positive pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupConMask {
    size: usize,
    bits: Vec<bool>,
}

impl SupConMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.bits
            .chunks(self.size.max(1))
            .take(self.size)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Label-equality mask, or the identity when no labels are given
/// (self-supervised semantics).
pub fn build_mask(labels: Option<&[usize]>, batch: usize) -> SupConMask {
    let bits = match labels {
        Some(l) => {
            let n = l.len();
            return SupConMask {
                size: n,
                bits: (0..n * n).map(|k| l[k / n] == l[k % n]).collect(),
            };
        }
        None => (0..batch * batch).map(|k| k / batch == k % batch).collect(),
    };
    SupConMask { size: batch, bits }
}

/// Supervised contrastive loss on raw projections, averaged over anchors
/// that have at least one positive, with its gradient with respect to the
/// raw (pre-normalization) projections.
pub fn supcon_loss(
    projections: &[f64],
    dim: usize,
    labels: &[usize],
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mask = build_mask(Some(labels), labels.len());
    supcon_loss_masked(projections, dim, &mask, config)
}

/// As [`supcon_loss`], with positives given by an explicit mask. The
/// diagonal of the mask is ignored: an anchor is never its own positive.
pub fn supcon_loss_masked(
    projections: &[f64],
    dim: usize,
    mask: &SupConMask,
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let b = mask.size();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if projections.len() != b * dim {
        return Err(Error::ShapeMismatch(format!(
            "{} projection values for a batch of {b} x {dim}",
            projections.len()
        )));
    }
    let tau = config.temperature;
    let (f, norms) = normalize_with_norms(projections, dim)?;

    // similarity logits
    let mut sim = vec![0.0; b * b];
    for i in 0..b {
        let fi = &f[i * dim..(i + 1) * dim];
        for j in i..b {
            let fj = &f[j * dim..(j + 1) * dim];
            let s = fi.iter().zip(fj).map(|(x, y)| x * y).sum::<f64>() / tau;
            sim[i * b + j] = s;
            sim[j * b + i] = s;
        }
    }

    let positives: Vec<usize> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && mask.get(i, j)).count())
        .collect();
    let active = positives.iter().filter(|&&n| n > 0).count();
    if active == 0 {
        return Ok((0.0, vec![0.0; projections.len()]));
    }
    let inv_active = 1.0 / active as f64;

    let mut loss = 0.0;
    let mut dsim = vec![0.0; b * b];
    for i in 0..b {
        if positives[i] == 0 {
            continue;
        }
        let row = &sim[i * b..(i + 1) * b];
        let in_denominator = |a: usize| a != i || config.include_anchor_in_denominator;
        let m = (0..b)
            .filter(|&a| in_denominator(a))
            .map(|a| row[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).filter(|&a| in_denominator(a)).map(|a| (row[a] - m).exp()).sum();
        let lse = m + z.ln();
        let inv_p = 1.0 / positives[i] as f64;
        let pos_sum: f64 = (0..b).filter(|&j| j != i && mask.get(i, j)).map(|j| row[j]).sum();
        loss += lse - pos_sum * inv_p;

        let drow = &mut dsim[i * b..(i + 1) * b];
        for a in (0..b).filter(|&a| in_denominator(a)) {
            drow[a] += (row[a] - lse).exp() * inv_active;
        }
        for j in (0..b).filter(|&j| j != i && mask.get(i, j)) {
            drow[j] -= inv_p * inv_active;
        }
    }

    // sim_ij = f_i . f_j / tau
    let mut df = vec![0.0; b * dim];
    for i in 0..b {
        for j in 0..b {
            let g = dsim[i * b + j] / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..dim {
                df[i * dim + k] += g * f[j * dim + k];
                df[j * dim + k] += g * f[i * dim + k];
            }
        }
    }

    // f = v / |v|  =>  dv = (df - f (f . df)) / |v|
    let mut dv = vec![0.0; b * dim];
    for i in 0..b {
        let fi = &f[i * dim..(i + 1) * dim];
        let dfi = &df[i * dim..(i + 1) * dim];
        let dot: f64 = fi.iter().zip(dfi).map(|(x, y)| x * y).sum();
        for k in 0..dim {
            dv[i * dim + k] = (dfi[k] - fi[k] * dot) / norms[i];
        }
    }

    Ok((loss * inv_active, dv))
}
