//! Wafer-map data model, the canonical text format, labeled/unlabeled
//! splitting and a procedural generator for the nine defect patterns.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Die states.
pub const BACKGROUND: u8 = 0;
pub const PASS: u8 = 1;
pub const FAIL: u8 = 2;

pub const NUM_CLASSES: usize = 9;

/// Header tag of the canonical dataset format.
pub const FORMAT_TAG: &str = "waferssl-v1";

/// Defect pattern class. The discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Center = 0,
    Donut = 1,
    EdgeLoc = 2,
    EdgeRing = 3,
    Loc = 4,
    NearFull = 5,
    Random = 6,
    Scratch = 7,
    None = 8,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Center,
        ClassLabel::Donut,
        ClassLabel::EdgeLoc,
        ClassLabel::EdgeRing,
        ClassLabel::Loc,
        ClassLabel::NearFull,
        ClassLabel::Random,
        ClassLabel::Scratch,
        ClassLabel::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Center => "Center",
            ClassLabel::Donut => "Donut",
            ClassLabel::EdgeLoc => "Edge-Loc",
            ClassLabel::EdgeRing => "Edge-Ring",
            ClassLabel::Loc => "Loc",
            ClassLabel::NearFull => "Near-full",
            ClassLabel::Random => "Random",
            ClassLabel::Scratch => "Scratch",
            ClassLabel::None => "None",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<usize>() {
            return ClassLabel::from_index(i).ok_or(Error::BadLabel(i));
        }
        ClassLabel::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown class `{s}`")))
    }
}

/// A single wafer: a row-major grid of die states plus an optional label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WaferMap {
    height: usize,
    width: usize,
    grid: Vec<u8>,
    label: Option<ClassLabel>,
}

impl WaferMap {
    pub fn new(
        height: usize,
        width: usize,
        grid: Vec<u8>,
        label: Option<ClassLabel>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::BadDimensions(format!("{height}x{width}")));
        }
        if grid.len() != height * width {
            return Err(Error::BadDimensions(format!(
                "grid has {} cells, expected {height}x{width}",
                grid.len()
            )));
        }
        if let Some(v) = grid.iter().find(|&&v| v > FAIL) {
            return Err(Error::BadDimensions(format!("die state {v} outside {{0,1,2}}")));
        }
        Ok(WaferMap {
            height,
            width,
            grid,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn label(&self) -> Option<ClassLabel> {
        self.label
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.width + col]
    }

    pub fn with_label(mut self, label: Option<ClassLabel>) -> Self {
        self.label = label;
        self
    }

    /// Builds a wafer from a grid the caller guarantees is valid.
    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        grid: Vec<u8>,
        label: Option<ClassLabel>,
    ) -> Self {
        debug_assert_eq!(grid.len(), height * width);
        debug_assert!(grid.iter().all(|&v| v <= FAIL));
        WaferMap {
            height,
            width,
            grid,
            label,
        }
    }

    pub fn count_state(&self, state: u8) -> usize {
        self.grid.iter().filter(|&&v| v == state).count()
    }
}

/// Ordered wafer collection with per-class bookkeeping. All records share
/// one set of dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    records: Vec<WaferMap>,
    counts_per_class: [usize; NUM_CLASSES],
    unlabeled_count: usize,
    dims: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dims(height: usize, width: usize) -> Self {
        Dataset {
            dims: Some((height, width)),
            ..Self::default()
        }
    }

    pub fn from_records(records: Vec<WaferMap>) -> Result<Self> {
        let mut ds = Dataset::new();
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, record: WaferMap) -> Result<()> {
        match self.dims {
            Some(d) if d != record.dims() => {
                return Err(Error::BadDimensions(format!(
                    "record is {}x{}, dataset is {}x{}",
                    record.height, record.width, d.0, d.1
                )))
            }
            _ => self.dims = Some(record.dims()),
        }
        match record.label {
            Some(c) => self.counts_per_class[c.index()] += 1,
            None => self.unlabeled_count += 1,
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[WaferMap] {
        &self.records
    }

    pub fn into_records(self) -> Vec<WaferMap> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.dims
    }

    pub fn counts_per_class(&self) -> &[usize; NUM_CLASSES] {
        &self.counts_per_class
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.counts_per_class[class.index()]
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled_count
    }

    /// Errors with `UnlabeledInput` naming the first record without a label.
    pub fn require_labeled(&self) -> Result<()> {
        match self.records.iter().position(|r| r.label.is_none()) {
            Some(index) => Err(Error::UnlabeledInput { index }),
            None => Ok(()),
        }
    }

    /// Labels of a fully labeled dataset.
    pub fn labels(&self) -> Result<Vec<ClassLabel>> {
        self.records
            .iter()
            .enumerate()
            .map(|(index, r)| r.label.ok_or(Error::UnlabeledInput { index }))
            .collect()
    }

    /// Recomputes counts from the records and compares with the stored ones.
    pub fn counts_consistent(&self) -> bool {
        let mut counts = [0usize; NUM_CLASSES];
        let mut unlabeled = 0;
        for r in &self.records {
            match r.label {
                Some(c) => counts[c.index()] += 1,
                None => unlabeled += 1,
            }
        }
        counts == self.counts_per_class && unlabeled == self.unlabeled_count
    }

    /// Plain-text class-count table.
    pub fn count_table(&self) -> String {
        let mut out = String::new();
        for c in ClassLabel::ALL {
            out.push_str(&format!("{:<10} {}\n", c.name(), self.count(c)));
        }
        out.push_str(&format!("{:<10} {}\n", "unlabeled", self.unlabeled_count));
        out.push_str(&format!("{:<10} {}\n", "total", self.len()));
        out
    }
}

fn format_err(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        message: message.into(),
    }
}

/// Reads a dataset in the canonical line format.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let (height, width) = loop {
        match lines.next() {
            None => return Err(format_err(1, "missing header")),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io("<stream>", e))?;
                let line = line.trim_end();
                if line.is_empty() {
                    continue;
                }
                break parse_header(i + 1, line)?;
            }
        }
    };

    let mut ds = if height == 0 {
        Dataset::new()
    } else {
        Dataset::with_dims(height, width)
    };
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if height == 0 {
            return Err(format_err(lineno, "records present but header declares 0x0"));
        }
        ds.push(parse_record(lineno, line, height, width)?)?;
    }
    Ok(ds)
}

fn parse_header(lineno: usize, line: &str) -> Result<(usize, usize)> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != FORMAT_TAG {
        return Err(format_err(
            lineno,
            format!("expected header `{FORMAT_TAG} <height> <width>`"),
        ));
    }
    let h: usize = toks[1]
        .parse()
        .map_err(|_| format_err(lineno, format!("bad height `{}`", toks[1])))?;
    let w: usize = toks[2]
        .parse()
        .map_err(|_| format_err(lineno, format!("bad width `{}`", toks[2])))?;
    if (h == 0) != (w == 0) {
        return Err(format_err(lineno, format!("bad dimensions {h}x{w}")));
    }
    Ok((h, w))
}

fn parse_record(lineno: usize, line: &str, height: usize, width: usize) -> Result<WaferMap> {
    let mut toks = line.split_whitespace();
    let (label_tok, grid_tok) = match (toks.next(), toks.next(), toks.next()) {
        (Some(l), Some(g), None) => (l, g),
        _ => return Err(format_err(lineno, "expected `<label-or-dash> <grid-digits>`")),
    };
    let label = if label_tok == "-" {
        None
    } else {
        let idx: usize = label_tok
            .parse()
            .map_err(|_| format_err(lineno, format!("bad label `{label_tok}`")))?;
        Some(
            ClassLabel::from_index(idx)
                .ok_or_else(|| format_err(lineno, format!("label {idx} outside 0..8")))?,
        )
    };
    if grid_tok.len() != height * width {
        return Err(format_err(
            lineno,
            format!(
                "grid has {} digits, expected {}",
                grid_tok.len(),
                height * width
            ),
        ));
    }
    let mut grid = Vec::with_capacity(grid_tok.len());
    for (pos, b) in grid_tok.bytes().enumerate() {
        match b {
            b'0'..=b'2' => grid.push(b - b'0'),
            _ => {
                return Err(format_err(
                    lineno,
                    format!("die state `{}` at position {pos} outside {{0,1,2}}", b as char),
                ))
            }
        }
    }
    Ok(WaferMap::from_parts_unchecked(height, width, grid, label))
}

/// Writes a dataset in the canonical line format, one record per line.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(dataset, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_dataset<W: Write>(dataset: &Dataset, w: &mut W) -> std::io::Result<()> {
    let (h, wd) = dataset.dims.unwrap_or((0, 0));
    writeln!(w, "{FORMAT_TAG} {h} {wd}")?;
    let mut line = Vec::new();
    for r in &dataset.records {
        line.clear();
        match r.label {
            Some(c) => line.push(b'0' + c.index() as u8),
            None => line.push(b'-'),
        }
        line.push(b' ');
        line.extend(r.grid.iter().map(|&v| b'0' + v));
        line.push(b'\n');
        w.write_all(&line)?;
    }
    Ok(())
}

/// Stratified split: per class, `ceil(fraction * count)` records keep their
/// label and the rest go to the unlabeled set with the label stripped.
/// Both outputs preserve input order.
pub fn split_labeled_fraction(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "labeled fraction {fraction} outside (0, 1]"
        )));
    }
    let labels = dataset.labels()?;

    let mut keep = vec![false; dataset.len()];
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n_keep = labeled_quota(fraction, members.len());
        let mut rng = rng_from(derive_seed(seed, &[0x5, class.index() as u64]));
        members.shuffle(&mut rng);
        for &i in &members[..n_keep] {
            keep[i] = true;
        }
    }

    let mut labeled = empty_like(dataset);
    let mut unlabeled = empty_like(dataset);
    for (r, &k) in dataset.records.iter().zip(&keep) {
        if k {
            labeled.push(r.clone())?;
        } else {
            unlabeled.push(r.clone().with_label(None))?;
        }
    }
    Ok((labeled, unlabeled))
}

/// `ceil(fraction * count)`, tolerant of representation error in the product
/// (0.1 * 200 must give 20, not 21).
pub fn labeled_quota(fraction: f64, count: usize) -> usize {
    let exact = fraction * count as f64;
    let rounded = exact.round();
    let q = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (q as usize).clamp(1.min(count), count)
}

pub(crate) fn empty_like(dataset: &Dataset) -> Dataset {
    match dataset.dims {
        Some((h, w)) => Dataset::with_dims(h, w),
        None => Dataset::new(),
    }
}

/// Die-center geometry of the inscribed disc.
#[derive(Debug, Clone, Copy)]
pub struct DiscGeometry {
    pub center_row: f64,
    pub center_col: f64,
    pub radius: f64,
}

impl DiscGeometry {
    pub fn for_dims(height: usize, width: usize) -> Self {
        DiscGeometry {
            center_row: height as f64 / 2.0,
            center_col: width as f64 / 2.0,
            radius: height.min(width) as f64 / 2.0,
        }
    }

    /// Offset of a die center from the wafer center, as (dy, dx).
    pub fn offset(&self, row: usize, col: usize) -> (f64, f64) {
        (
            row as f64 + 0.5 - self.center_row,
            col as f64 + 0.5 - self.center_col,
        )
    }

    pub fn distance(&self, row: usize, col: usize) -> f64 {
        let (dy, dx) = self.offset(row, col);
        dy.hypot(dx)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.distance(row, col) <= self.radius
    }
}

/// Minimum side length accepted by the generator.
pub const MIN_SYNTH_SIDE: usize = 16;

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Procedurally draws one wafer of the given class. Pure in its arguments.
pub fn generate_synthetic_wafer(
    class: ClassLabel,
    height: usize,
    width: usize,
    seed: u64,
    noise_rate: f64,
) -> Result<WaferMap> {
    use std::f64::consts::TAU;

    if height < MIN_SYNTH_SIDE || width < MIN_SYNTH_SIDE {
        return Err(Error::BadDimensions(format!(
            "synthetic wafers need both sides >= {MIN_SYNTH_SIDE}, got {height}x{width}"
        )));
    }
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(Error::ConfigInvalid(format!(
            "noise rate {noise_rate} outside [0, 0.5)"
        )));
    }

    let geo = DiscGeometry::for_dims(height, width);
    let r = geo.radius;
    let mut rng = rng_from(seed);
    let mut grid: Vec<u8> = (0..height * width)
        .map(|i| {
            if geo.contains(i / width, i % width) {
                PASS
            } else {
                BACKGROUND
            }
        })
        .collect();
    let in_disc: Vec<usize> = (0..grid.len()).filter(|&i| grid[i] != BACKGROUND).collect();

    let mark_where = |grid: &mut Vec<u8>, pred: &dyn Fn(f64, f64) -> bool| {
        for &i in &in_disc {
            let (dy, dx) = geo.offset(i / width, i % width);
            if pred(dy, dx) {
                grid[i] = FAIL;
            }
        }
    };

    match class {
        ClassLabel::Center => {
            let blob = r * rng.gen_range(0.2..0.35);
            let jr = r * rng.gen_range(0.0..0.08);
            let ja = rng.gen_range(0.0..TAU);
            let (cy, cx) = (jr * ja.sin(), jr * ja.cos());
            mark_where(&mut grid, &|dy, dx| (dy - cy).hypot(dx - cx) <= blob);
        }
        ClassLabel::Donut => {
            let inner = r * rng.gen_range(0.25..0.35);
            let outer = inner + r * rng.gen_range(0.2..0.3);
            mark_where(&mut grid, &|dy, dx| {
                let d = dy.hypot(dx);
                d >= inner && d <= outer
            });
        }
        ClassLabel::EdgeLoc => {
            let centre_angle = rng.gen_range(0.0..TAU);
            let half_width = rng.gen_range(0.35..0.7);
            let depth = r * rng.gen_range(0.15..0.3);
            mark_where(&mut grid, &|dy, dx| {
                dy.hypot(dx) >= r - depth && angle_diff(dy.atan2(dx), centre_angle) <= half_width
            });
        }
        ClassLabel::EdgeRing => {
            let band = rng.gen_range(1.0..2.0);
            mark_where(&mut grid, &|dy, dx| r - dy.hypot(dx) < band);
        }
        ClassLabel::Loc => {
            let dist = r * rng.gen_range(0.3..0.6);
            let ang = rng.gen_range(0.0..TAU);
            let blob = r * rng.gen_range(0.12..0.22);
            let (cy, cx) = (dist * ang.sin(), dist * ang.cos());
            mark_where(&mut grid, &|dy, dx| (dy - cy).hypot(dx - cx) <= blob);
        }
        ClassLabel::NearFull => {
            let frac: f64 = rng.gen_range(0.85..0.97);
            let n_fail = (frac * in_disc.len() as f64).ceil() as usize;
            let mut order = in_disc.clone();
            order.shuffle(&mut rng);
            for &i in &order[..n_fail.min(order.len())] {
                grid[i] = FAIL;
            }
        }
        ClassLabel::Random => {
            for &i in &in_disc {
                if rng.gen_bool(0.15) {
                    grid[i] = FAIL;
                }
            }
        }
        ClassLabel::Scratch => {
            let start_d = r * rng.gen_range(0.0..0.7);
            let start_a = rng.gen_range(0.0..TAU);
            let mut y = geo.center_row + start_d * start_a.sin();
            let mut x = geo.center_col + start_d * start_a.cos();
            let mut heading = rng.gen_range(0.0..TAU);
            let segments = rng.gen_range(2..=4);
            for _ in 0..segments {
                let len = r * rng.gen_range(0.3..0.8);
                let (ny, nx) = (y + len * heading.sin(), x + len * heading.cos());
                rasterize_segment(&mut grid, &geo, height, width, (y, x), (ny, nx));
                (y, x) = (ny, nx);
                heading += rng.gen_range(-0.6..0.6);
            }
        }
        ClassLabel::None => {}
    }

    if noise_rate > 0.0 {
        for &i in &in_disc {
            if rng.gen_bool(noise_rate) {
                grid[i] = if grid[i] == FAIL { PASS } else { FAIL };
            }
        }
    }

    Ok(WaferMap::from_parts_unchecked(height, width, grid, Some(class)))
}

/// Marks the dies visited by a DDA walk from `a` to `b`, clipped to the disc.
fn rasterize_segment(
    grid: &mut [u8],
    geo: &DiscGeometry,
    height: usize,
    width: usize,
    a: (f64, f64),
    b: (f64, f64),
) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let y = a.0 + t * (b.0 - a.0);
        let x = a.1 + t * (b.1 - a.1);
        if y < 0.0 || x < 0.0 {
            continue;
        }
        let (row, col) = (y.floor() as usize, x.floor() as usize);
        if row < height && col < width && geo.contains(row, col) {
            grid[row * width + col] = FAIL;
        }
    }
}

/// Generates `per_class_counts[c]` wafers of every class, class-major.
pub fn generate_synthetic_dataset(
    per_class_counts: &[usize; NUM_CLASSES],
    height: usize,
    width: usize,
    seed: u64,
    noise_rate: f64,
) -> Result<Dataset> {
    if height < MIN_SYNTH_SIDE || width < MIN_SYNTH_SIDE {
        return Err(Error::BadDimensions(format!(
            "synthetic wafers need both sides >= {MIN_SYNTH_SIDE}, got {height}x{width}"
        )));
    }
    let mut ds = Dataset::with_dims(height, width);
    for class in ClassLabel::ALL {
        for i in 0..per_class_counts[class.index()] {
            let s = derive_seed(seed, &[class.index() as u64, i as u64]);
            ds.push(generate_synthetic_wafer(class, height, width, s, noise_rate)?)?;
        }
    }
    Ok(ds)
}

/// Minimum target side accepted by [`encode_input`].
pub const MIN_ENCODE_SIDE: usize = 8;

/// One-hot encodes a wafer into a `3 x target_height x target_width`
/// channel-major tensor after a nearest-neighbor resize.
pub fn encode_input(wafer: &WaferMap, target_height: usize, target_width: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; 3 * target_height * target_width];
    encode_input_into(wafer, target_height, target_width, &mut out)?;
    Ok(out)
}

pub fn encode_input_into(
    wafer: &WaferMap,
    target_height: usize,
    target_width: usize,
    out: &mut [f64],
) -> Result<()> {
    if target_height < MIN_ENCODE_SIDE || target_width < MIN_ENCODE_SIDE {
        return Err(Error::BadDimensions(format!(
            "encode target {target_height}x{target_width} below {MIN_ENCODE_SIDE}"
        )));
    }
    let plane = target_height * target_width;
    if out.len() != 3 * plane {
        return Err(Error::ShapeMismatch(format!(
            "encode buffer has {} slots, expected {}",
            out.len(),
            3 * plane
        )));
    }
    out.fill(0.0);
    for ty in 0..target_height {
        let sy = ty * wafer.height / target_height;
        for tx in 0..target_width {
            let sx = tx * wafer.width / target_width;
            let state = wafer.get(sy, sx) as usize;
            out[state * plane + ty * target_width + tx] = 1.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fail_count_in_disc(w: &WaferMap) -> (usize, usize) {
        let geo = DiscGeometry::for_dims(w.height(), w.width());
        let mut fails = 0;
        let mut total = 0;
        for r in 0..w.height() {
            for c in 0..w.width() {
                if geo.contains(r, c) {
                    total += 1;
                    if w.get(r, c) == FAIL {
                        fails += 1;
                    }
                }
            }
        }
        (fails, total)
    }

    #[test]
    fn class_label_bijection() {
        for (i, c) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*c));
            assert_eq!(c.name().parse::<ClassLabel>().unwrap(), *c);
        }
        assert_eq!(ClassLabel::from_index(9), None);
    }

    #[test]
    fn wafer_rejects_bad_state_and_shape() {
        assert!(WaferMap::new(2, 2, vec![0, 1, 2, 3], None).is_err());
        assert!(WaferMap::new(2, 2, vec![0, 1, 2], None).is_err());
        assert!(WaferMap::new(2, 2, vec![0, 1, 2, 1], Some(ClassLabel::Loc)).is_ok());
    }

    #[test]
    fn load_rejects_state_three_with_line_number() {
        let text = "waferssl-v1 2 2\n0 0120\n1 0130\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_bad_label_and_length() {
        assert!(matches!(
            read_dataset("waferssl-v1 2 2\n9 0120\n".as_bytes()),
            Err(Error::Format { line: 2, .. })
        ));
        assert!(matches!(
            read_dataset("waferssl-v1 2 2\n1 012\n".as_bytes()),
            Err(Error::Format { line: 2, .. })
        ));
        assert!(matches!(
            read_dataset("waferssl-v2 2 2\n".as_bytes()),
            Err(Error::Format { line: 1, .. })
        ));
    }

    #[test]
    fn empty_dataset_round_trip() {
        let mut buf = Vec::new();
        write_dataset(&Dataset::new(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "waferssl-v1 0 0\n");
        assert_eq!(read_dataset(&buf[..]).unwrap(), Dataset::new());
    }

    #[test]
    fn single_record_round_trip() {
        let w = generate_synthetic_wafer(ClassLabel::Donut, 16, 16, 3, 0.0).unwrap();
        let ds = Dataset::from_records(vec![w]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn split_full_fraction_is_identity() {
        let ds = generate_synthetic_dataset(&[5; 9], 16, 16, 1, 0.0).unwrap();
        let (lab, unl) = split_labeled_fraction(&ds, 1.0, 0).unwrap();
        assert_eq!(lab, ds);
        assert!(unl.is_empty());
    }

    #[test]
    fn split_ten_percent_of_two_hundred() {
        let mut counts = [0; 9];
        counts[ClassLabel::Loc.index()] = 200;
        let ds = generate_synthetic_dataset(&counts, 16, 16, 1, 0.0).unwrap();
        let (lab, unl) = split_labeled_fraction(&ds, 0.1, 9).unwrap();
        assert_eq!(lab.len(), 20);
        assert_eq!(unl.len(), 180);
        assert_eq!(unl.unlabeled_count(), 180);
    }

    #[test]
    fn split_is_seeded() {
        let mut counts = [0; 9];
        counts[0] = 200;
        let ds = generate_synthetic_dataset(&counts, 16, 16, 1, 0.0).unwrap();
        let a = split_labeled_fraction(&ds, 0.1, 1).unwrap();
        let b = split_labeled_fraction(&ds, 0.1, 1).unwrap();
        let c = split_labeled_fraction(&ds, 0.1, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_keeps_every_nonempty_class() {
        let ds = generate_synthetic_dataset(&[1, 2, 3, 0, 1, 1, 7, 1, 1], 16, 16, 1, 0.0).unwrap();
        let (lab, _) = split_labeled_fraction(&ds, 0.01, 4).unwrap();
        for c in ClassLabel::ALL {
            assert_eq!(lab.count(c) >= 1, ds.count(c) >= 1, "{c}");
        }
    }

    #[test]
    fn split_requires_labels() {
        let w = generate_synthetic_wafer(ClassLabel::Loc, 16, 16, 0, 0.0).unwrap();
        let ds = Dataset::from_records(vec![w.clone(), w.with_label(None)]).unwrap();
        assert!(matches!(
            split_labeled_fraction(&ds, 0.5, 0),
            Err(Error::UnlabeledInput { index: 1 })
        ));
    }

    #[test]
    fn quota_is_exact_ceiling() {
        assert_eq!(labeled_quota(0.1, 200), 20);
        assert_eq!(labeled_quota(0.1, 201), 21);
        assert_eq!(labeled_quota(0.1, 3), 1);
        assert_eq!(labeled_quota(1.0, 7), 7);
        assert_eq!(labeled_quota(0.3, 10), 3);
    }

    #[test]
    fn none_pattern_noiseless_has_no_fails() {
        for seed in 0..10 {
            let w = generate_synthetic_wafer(ClassLabel::None, 24, 24, seed, 0.0).unwrap();
            assert_eq!(w.count_state(FAIL), 0);
        }
    }

    #[test]
    fn near_full_fail_fraction() {
        let w = generate_synthetic_wafer(ClassLabel::NearFull, 24, 24, 7, 0.0).unwrap();
        let (fails, total) = fail_count_in_disc(&w);
        assert!(fails as f64 / total as f64 >= 0.8, "{fails}/{total}");
    }

    #[test]
    fn edge_ring_hugs_the_rim() {
        let w = generate_synthetic_wafer(ClassLabel::EdgeRing, 24, 24, 3, 0.0).unwrap();
        let geo = DiscGeometry::for_dims(24, 24);
        let mut any = false;
        for r in 0..24 {
            for c in 0..24 {
                if w.get(r, c) == FAIL {
                    any = true;
                    assert!(geo.radius - geo.distance(r, c) <= 2.0);
                }
            }
        }
        assert!(any);
    }

    #[test]
    fn every_pattern_but_none_has_failures() {
        for c in ClassLabel::ALL {
            let w = generate_synthetic_wafer(c, 24, 24, 11, 0.0).unwrap();
            assert_eq!(w.count_state(FAIL) > 0, c != ClassLabel::None, "{c}");
            assert_eq!(w.label(), Some(c));
        }
    }

    #[test]
    fn background_is_disc_complement() {
        let geo = DiscGeometry::for_dims(20, 24);
        let w = generate_synthetic_wafer(ClassLabel::Random, 20, 24, 5, 0.2).unwrap();
        for r in 0..20 {
            for c in 0..24 {
                assert_eq!(w.get(r, c) == BACKGROUND, !geo.contains(r, c));
            }
        }
    }

    #[test]
    fn generator_rejects_small_dims() {
        assert!(matches!(
            generate_synthetic_wafer(ClassLabel::Loc, 15, 24, 0, 0.0),
            Err(Error::BadDimensions(_))
        ));
    }

    #[test]
    fn dataset_counts_and_order() {
        assert!(generate_synthetic_dataset(&[0; 9], 24, 24, 0, 0.0).unwrap().is_empty());
        let mut counts = [0; 9];
        counts[ClassLabel::Donut.index()] = 3;
        let ds = generate_synthetic_dataset(&counts, 24, 24, 0, 0.0).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.records().iter().all(|r| r.label() == Some(ClassLabel::Donut)));

        let mut skew = [0; 9];
        skew[ClassLabel::None.index()] = 1000;
        skew[ClassLabel::Donut.index()] = 3;
        skew[ClassLabel::NearFull.index()] = 1;
        let ds = generate_synthetic_dataset(&skew, 16, 16, 2, 0.0).unwrap();
        assert_eq!(ds.counts_per_class(), &skew);
        assert!(ds.counts_consistent());
        // class-major
        assert_eq!(ds.records()[0].label(), Some(ClassLabel::Donut));
        assert_eq!(ds.records()[3].label(), Some(ClassLabel::NearFull));
    }

    #[test]
    fn encode_identity_counts() {
        let w = generate_synthetic_wafer(ClassLabel::Center, 24, 24, 1, 0.05).unwrap();
        let t = encode_input(&w, 24, 24).unwrap();
        let plane = 24 * 24;
        for s in 0..3u8 {
            let sum: f64 = t[s as usize * plane..(s as usize + 1) * plane].iter().sum();
            assert_eq!(sum as usize, w.count_state(s));
        }
    }

    #[test]
    fn encode_all_background() {
        let w = WaferMap::new(10, 10, vec![0; 100], None).unwrap();
        let t = encode_input(&w, 12, 9).unwrap();
        let plane = 12 * 9;
        assert!(t[..plane].iter().all(|&v| v == 1.0));
        assert!(t[plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_upscale_partition_of_unity() {
        let w = generate_synthetic_wafer(ClassLabel::Center, 24, 24, 4, 0.0).unwrap();
        let t = encode_input(&w, 32, 32).unwrap();
        let plane = 32 * 32;
        for p in 0..plane {
            assert_eq!(t[p] + t[plane + p] + t[2 * plane + p], 1.0);
        }
        assert!(encode_input(&w, 7, 32).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(0u8..3, h * w),
                    proptest::option::of(0usize..9),
                ),
                0..12,
            )
            .prop_map(move |recs| {
                let mut ds = Dataset::with_dims(h, w);
                for (g, l) in recs {
                    let l = l.and_then(ClassLabel::from_index);
                    ds.push(WaferMap::new(h, w, g, l).unwrap()).unwrap();
                }
                ds
            })
        })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(ds in arb_dataset()) {
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(&buf[..]).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn split_is_a_partition(seed in any::<u64>(), frac in 0.05f64..=1.0) {
            let ds = generate_synthetic_dataset(&[3, 1, 4, 1, 5, 0, 2, 6, 5], 16, 16, 8, 0.0).unwrap();
            let (lab, unl) = split_labeled_fraction(&ds, frac, seed).unwrap();
            let mut got: Vec<&[u8]> = lab.records().iter().chain(unl.records()).map(|r| r.grid()).collect();
            let mut want: Vec<&[u8]> = ds.records().iter().map(|r| r.grid()).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
            prop_assert!(lab.records().iter().all(|r| r.label().is_some()));
            prop_assert!(unl.records().iter().all(|r| r.label().is_none()));
        }

        #[test]
        fn generator_is_pure(seed in any::<u64>(), class in 0usize..9, noise in 0.0f64..0.3) {
            let c = ClassLabel::from_index(class).unwrap();
            let a = generate_synthetic_wafer(c, 20, 18, seed, noise).unwrap();
            let b = generate_synthetic_wafer(c, 20, 18, seed, noise).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
