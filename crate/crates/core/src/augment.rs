//! Stochastic input perturbations applied independently to the student and
//! teacher views of a record.

use rand::Rng as _;

use crate::dataset::{WaferMap, BACKGROUND, FAIL, PASS};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const MAX_DIE_NOISE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Uniform rotation among 0/90/180/270 degrees (0/180 for non-square grids).
    pub rotate_90s: bool,
    /// Independent horizontal and vertical coin flips.
    pub flip: bool,
    /// Per-die pass/fail flip probability inside the wafer.
    pub die_noise_rate: f64,
}

impl AugmentPolicy {
    pub const IDENTITY: AugmentPolicy = AugmentPolicy {
        rotate_90s: false,
        flip: false,
        die_noise_rate: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_DIE_NOISE).contains(&self.die_noise_rate) {
            return Err(Error::ConfigInvalid(format!(
                "die_noise_rate {} outside [0, {MAX_DIE_NOISE}]",
                self.die_noise_rate
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.rotate_90s && !self.flip && self.die_noise_rate == 0.0
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate_90s: true,
            flip: true,
            die_noise_rate: 0.02,
        }
    }
}

/// Quarter turns clockwise.
pub fn rotate(wafer: &WaferMap, quarter_turns: u8) -> WaferMap {
    let (h, w) = wafer.dims();
    let g = wafer.grid();
    let q = quarter_turns % 4;
    let (nh, nw) = if q % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![0u8; h * w];
    for r in 0..nh {
        for c in 0..nw {
            let (sr, sc) = match q {
                0 => (r, c),
                1 => (h - 1 - c, r),
                2 => (h - 1 - r, w - 1 - c),
                _ => (c, w - 1 - r),
            };
            out[r * nw + c] = g[sr * w + sc];
        }
    }
    WaferMap::from_parts_unchecked(nh, nw, out, wafer.label())
}

pub fn flip(wafer: &WaferMap, horizontal: bool, vertical: bool) -> WaferMap {
    let (h, w) = wafer.dims();
    let g = wafer.grid();
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        let sr = if vertical { h - 1 - r } else { r };
        for c in 0..w {
            let sc = if horizontal { w - 1 - c } else { c };
            out[r * w + c] = g[sr * w + sc];
        }
    }
    WaferMap::from_parts_unchecked(h, w, out, wafer.label())
}

/// Rotation, then flips, then die noise, all drawn from `seed`. Background
/// dies are never touched and the label is preserved.
pub fn augment(wafer: &WaferMap, policy: &AugmentPolicy, seed: u64) -> WaferMap {
    if policy.is_identity() {
        return wafer.clone();
    }
    let mut rng = rng_from(seed);
    let mut out = wafer.clone();
    if policy.rotate_90s {
        let q = if wafer.height() == wafer.width() {
            rng.gen_range(0..4u8)
        } else {
            2 * rng.gen_range(0..2u8)
        };
        out = rotate(&out, q);
    }
    if policy.flip {
        let h: bool = rng.gen();
        let v: bool = rng.gen();
        out = flip(&out, h, v);
    }
    if policy.die_noise_rate > 0.0 {
        let (h, w) = out.dims();
        let mut grid = out.grid().to_vec();
        for s in grid.iter_mut() {
            if *s != BACKGROUND && rng.gen_bool(policy.die_noise_rate) {
                *s = if *s == FAIL { PASS } else { FAIL };
            }
        }
        out = WaferMap::from_parts_unchecked(h, w, grid, wafer.label());
    }
    out
}
