//! Confusion-matrix accounting and Accuracy / Precision / Recall / F1,
//! overall and per class.

use std::fmt::Write as _;

use crate::dataset::{ClassLabel, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= NUM_CLASSES {
                return Err(Error::BadLabel(v));
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }
}

pub fn confusion(preds: &[usize], truths: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Per-class scores. `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub support: u64,
    pub one_vs_rest_accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverallMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub overall: OverallMetrics,
    pub per_class: [ClassMetrics; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Support-weighted mean over classes where the metric is defined.
fn weighted_defined(per_class: &[ClassMetrics], pick: fn(&ClassMetrics) -> Option<f64>) -> f64 {
    let (sum, weight) = per_class.iter().fold((0.0, 0u64), |(s, w), c| match pick(c) {
        Some(v) => (s + v * c.support as f64, w + c.support),
        None => (s, w),
    });
    if weight == 0 {
        0.0
    } else {
        sum / weight as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_class: [ClassMetrics; NUM_CLASSES] = std::array::from_fn(|c| {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][c]).sum();
        let (fn_, fp) = (support - tp, predicted - tp);
        let tn = total - tp - fn_ - fp;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        // equals 2PR/(P+R) when both are defined, and is 0 for a class that
        // occurs but is never predicted (or predicted but never occurs)
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        ClassMetrics {
            support,
            one_vs_rest_accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
        }
    });
    let overall = OverallMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean_defined(per_class.iter().map(|c| c.precision)),
        macro_recall: mean_defined(per_class.iter().map(|c| c.recall)),
        macro_f1: mean_defined(per_class.iter().map(|c| c.f1)),
        weighted_precision: weighted_defined(&per_class, |c| c.precision),
        weighted_recall: weighted_defined(&per_class, |c| c.recall),
        weighted_f1: weighted_defined(&per_class, |c| c.f1),
    };
    Ok(MetricsReport {
        confusion: cm.clone(),
        overall,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Overall,
    PerClass,
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "n/a".to_string())
}

/// `accuracy, precision, recall, F1` as percentages.
pub fn overall_row(o: &OverallMetrics) -> String {
    format!(
        "{}, {}, {}, {}",
        pct(o.accuracy),
        pct(o.macro_precision),
        pct(o.macro_recall),
        pct(o.macro_f1)
    )
}

pub fn class_row(class: ClassLabel, m: &ClassMetrics) -> String {
    format!(
        "{:<10} {}, {}, {}, {}",
        class.name(),
        pct(m.one_vs_rest_accuracy),
        pct_opt(m.precision),
        pct_opt(m.recall),
        pct_opt(m.f1)
    )
}

/// Human-readable table. The overall style is a single row; the per-class
/// style has a header and one row per class in label order. Undefined
/// metrics print as `n/a`.
pub fn render_report(report: &MetricsReport, style: ReportStyle) -> String {
    match style {
        ReportStyle::Overall => overall_row(&report.overall),
        ReportStyle::PerClass => {
            let mut out = format!("{:<10} Accuracy, Precision, Recall, F1\n", "Class");
            for c in ClassLabel::ALL {
                out.push_str(&class_row(c, &report.per_class[c.index()]));
                out.push('\n');
            }
            out
        }
    }
}

fn kv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into())
}

/// One `key=value` per line; full-precision floats, `undefined` for metrics
/// without a defined denominator.
pub fn report_to_kv(report: &MetricsReport) -> String {
    let o = &report.overall;
    let mut out = String::new();
    let _ = writeln!(out, "samples={}", report.confusion.total());
    for (k, v) in [
        ("accuracy", o.accuracy),
        ("macro_precision", o.macro_precision),
        ("macro_recall", o.macro_recall),
        ("macro_f1", o.macro_f1),
        ("weighted_precision", o.weighted_precision),
        ("weighted_recall", o.weighted_recall),
        ("weighted_f1", o.weighted_f1),
    ] {
        let _ = writeln!(out, "{k}={v}");
    }
    for c in ClassLabel::ALL {
        let m = &report.per_class[c.index()];
        let n = c.name();
        let _ = writeln!(out, "class.{n}.support={}", m.support);
        let _ = writeln!(out, "class.{n}.accuracy={}", m.one_vs_rest_accuracy);
        let _ = writeln!(out, "class.{n}.precision={}", kv_opt(m.precision));
        let _ = writeln!(out, "class.{n}.recall={}", kv_opt(m.recall));
        let _ = writeln!(out, "class.{n}.f1={}", kv_opt(m.f1));
    }
    for t in 0..NUM_CLASSES {
        let row: Vec<String> = report.confusion.counts[t].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "confusion.{}={}", ClassLabel::ALL[t].name(), row.join(","));
    }
    out
}
