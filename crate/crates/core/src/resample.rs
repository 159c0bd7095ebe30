//! Class rebalancing: SMOTE over-sampling for minority classes and random
//! under-sampling for majority classes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng as _;

use crate::dataset::{empty_like, ClassLabel, Dataset, WaferMap};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_SMOTE_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    pub target_per_class: usize,
    pub smote_k: usize,
    pub seed: u64,
    /// Clamp `smote_k` to `class_count - 1` (with a warning) instead of
    /// failing when a class is too small for the requested k.
    pub allow_k_clamp: bool,
}

impl ResamplePlan {
    pub fn new(target_per_class: usize, seed: u64) -> Self {
        ResamplePlan {
            target_per_class,
            smote_k: DEFAULT_SMOTE_K,
            seed,
            allow_k_clamp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_per_class == 0 {
            return Err(Error::ConfigInvalid("target_per_class must be >= 1".into()));
        }
        if self.smote_k == 0 {
            return Err(Error::ConfigInvalid("smote_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For every sample, the indices of its `k` nearest other samples under the
/// Euclidean metric, nearest first. Ties go to the lower index.
pub fn knn_indices(samples: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..samples.len())
        .map(|i| {
            let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
            for (j, other) in samples.iter().enumerate() {
                if j == i {
                    continue;
                }
                let cand = Candidate {
                    dist: squared_distance(&samples[i], other),
                    index: j,
                };
                if heap.len() < k {
                    heap.push(cand);
                } else if heap.peek().is_some_and(|worst| cand < *worst) {
                    heap.pop();
                    heap.push(cand);
                }
            }
            heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
        })
        .collect()
}

fn check_smote_inputs(samples: &[Vec<f64>], k: usize, class: &str) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            class: class.to_string(),
            count: samples.len(),
        });
    }
    if k == 0 || k >= samples.len() {
        return Err(Error::BadK {
            k,
            n: samples.len(),
        });
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::ShapeMismatch("SMOTE samples differ in length".into()));
    }
    Ok(())
}

/// Draws `n_synthetic` points, each on the segment between a random sample
/// and one of its `k` nearest neighbors.
pub fn smote_oversample(
    class_samples: &[Vec<f64>],
    n_synthetic: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_smote_inputs(class_samples, k, "input")?;
    if n_synthetic == 0 {
        return Ok(Vec::new());
    }
    let neighbors = knn_indices(class_samples, k);
    let mut rng = rng_from(seed);
    let out = (0..n_synthetic)
        .map(|_| {
            let i = rng.gen_range(0..class_samples.len());
            let nn = neighbors[i][rng.gen_range(0..k)];
            let lambda: f64 = rng.gen();
            interpolate(&class_samples[i], &class_samples[nn], lambda)
        })
        .collect();
    Ok(out)
}

/// `a + lambda * (b - a)`, clamped per coordinate to the segment's bounding
/// box so rounding never leaves it.
fn interpolate(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x + lambda * (y - x)).clamp(x.min(y), x.max(y)))
        .collect()
}

/// Uniform subset of size `target` without replacement, in input order.
pub fn undersample<T: Clone>(class_samples: &[T], target: usize, seed: u64) -> Result<Vec<T>> {
    if target > class_samples.len() {
        return Err(Error::TargetTooLarge {
            target,
            n: class_samples.len(),
        });
    }
    let mut rng = rng_from(seed);
    let mut picked = rand::seq::index::sample(&mut rng, class_samples.len(), target).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| class_samples[i].clone()).collect())
}

/// Flattened one-hot encoding of a wafer at its native resolution.
fn one_hot(wafer: &WaferMap) -> Vec<f64> {
    let plane = wafer.grid().len();
    let mut v = vec![0.0; 3 * plane];
    for (p, &s) in wafer.grid().iter().enumerate() {
        v[s as usize * plane + p] = 1.0;
    }
    v
}

/// Per-die argmax over the three state channels; ties go to the lower state.
pub fn rediscretize(encoded: &[f64], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    debug_assert_eq!(encoded.len(), 3 * plane);
    (0..plane)
        .map(|p| {
            let mut best = 0u8;
            for s in 1..3u8 {
                if encoded[s as usize * plane + p] > encoded[best as usize * plane + p] {
                    best = s;
                }
            }
            best
        })
        .collect()
}

/// Brings every class to exactly `plan.target_per_class` records. Output is
/// class-major; within a class, kept originals precede synthetic records.
pub fn balance_dataset(dataset: &Dataset, plan: &ResamplePlan) -> Result<Dataset> {
    plan.validate()?;
    let labels = dataset.labels()?;
    let mut out = empty_like(dataset);
    let target = plan.target_per_class;

    for class in ClassLabel::ALL {
        let members: Vec<&WaferMap> = dataset
            .records()
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == class)
            .map(|(r, _)| r)
            .collect();
        let class_seed = derive_seed(plan.seed, &[class.index() as u64]);
        let n = members.len();

        if n >= target {
            for r in undersample(&members, target, class_seed)? {
                out.push(r.clone())?;
            }
            continue;
        }

        if n < 2 {
            return Err(Error::too_few(class, n));
        }
        let mut k = plan.smote_k;
        if k >= n {
            if !plan.allow_k_clamp {
                return Err(Error::BadK { k, n });
            }
            log::warn!("class {class}: clamping smote_k from {k} to {}", n - 1);
            k = n - 1;
        }
        let (h, w) = members[0].dims();
        let encoded: Vec<Vec<f64>> = members.iter().map(|r| one_hot(r)).collect();
        let synthetic = smote_oversample(&encoded, target - n, k, class_seed)
            .map_err(|e| match e {
                Error::TooFewSamples { count, .. } => Error::too_few(class, count),
                other => other,
            })?;
        for r in members {
            out.push(r.clone())?;
        }
        for v in synthetic {
            let grid = rediscretize(&v, h, w);
            out.push(WaferMap::from_parts_unchecked(h, w, grid, Some(class)))?;
        }
    }
    Ok(out)
}
