//! Focal loss and classification metrics.
//!
//! Per-class metrics are one-vs-rest. Any ratio with a zero denominator is
//! reported as 0 and the class is flagged in the report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Focal loss exponent used for training.
pub const FOCAL_GAMMA: f64 = 2.0;

/// Batch-mean focal loss on `(n, 1, 1, L)` logits.
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], gamma: T) -> Result<Var> {
    tape.focal_loss(logits, labels, gamma)
}

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    /// Build from explicit counts. Rows must all have length `counts.len()`.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let classes = counts.len();
        if counts.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.counts[c][c]).sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.counts[t][c]).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }
}

pub fn confusion(labels: &[usize], preds: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in labels.iter().zip(preds) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// `num / den`, or `(0, true)` when `den == 0`.
fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Global top-1 accuracy `trace / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace() as f64, cm.total() as f64).0
}

/// One-vs-rest accuracy `(TP + TN) / total` of class `c`.
pub fn class_accuracy(cm: &ConfusionMatrix, c: usize) -> f64 {
    ratio((cm.tp(c) + cm.tn(c)) as f64, cm.total() as f64).0
}

pub fn precision(cm: &ConfusionMatrix, c: usize) -> f64 {
    ratio(cm.tp(c) as f64, (cm.tp(c) + cm.fp(c)) as f64).0
}

pub fn sensitivity(cm: &ConfusionMatrix, c: usize) -> f64 {
    ratio(cm.tp(c) as f64, (cm.tp(c) + cm.fn_(c)) as f64).0
}

pub fn specificity(cm: &ConfusionMatrix, c: usize) -> f64 {
    ratio(cm.tn(c) as f64, (cm.tn(c) + cm.fp(c)) as f64).0
}

pub fn f1(cm: &ConfusionMatrix, c: usize) -> f64 {
    let (p, r) = (precision(cm, c), sensitivity(cm, c));
    ratio(2.0 * p * r, p + r).0
}

/// One-vs-rest ROC AUC per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over evaluated classes; `None` if every class was skipped.
    pub macro_auc: Option<f64>,
    pub skipped: Vec<usize>,
}

/// Mann–Whitney AUC with midranks for ties. `scores` is row-major `(n, classes)`.
pub fn roc_auc(scores: &[f64], labels: &[usize], classes: usize) -> Result<AucReport> {
    let n = labels.len();
    if classes == 0 || scores.len() != n * classes {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {n} samples × {classes} classes",
            scores.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for c in 0..classes {
        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let positives = labels.iter().filter(|&&y| y == c).count();
        let negatives = n - positives;
        if positives == 0 || negatives == 0 {
            per_class.push(None);
            skipped.push(c);
            continue;
        }
        let ranks = midranks(&col);
        let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == c).map(|(r, _)| r).sum();
        let (p, q) = (positives as f64, negatives as f64);
        per_class.push(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q)));
    }
    let evaluated: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    Ok(AucReport {
        per_class,
        macro_auc,
        skipped,
    })
}

/// 1-based ranks; tied values share the mean of their positions.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    /// Metrics that hit a zero denominator and were reported as 0.
    pub degenerate: Vec<String>,
}

impl ClassMetrics {
    fn compute(cm: &ConfusionMatrix, c: usize, name: String, auc: Option<f64>) -> Self {
        let (tp, fp, fn_, tn) = (cm.tp(c) as f64, cm.fp(c) as f64, cm.fn_(c) as f64, cm.tn(c) as f64);
        let mut degenerate = Vec::new();
        let mut flag = |label: &str, (v, zero): (f64, bool)| {
            if zero {
                degenerate.push(label.to_string());
            }
            v
        };
        let accuracy = flag("accuracy", ratio(tp + tn, cm.total() as f64));
        let precision = flag("precision", ratio(tp, tp + fp));
        let sensitivity = flag("sensitivity", ratio(tp, tp + fn_));
        let specificity = flag("specificity", ratio(tn, tn + fp));
        let f1 = flag("f1", ratio(2.0 * precision * sensitivity, precision + sensitivity));
        ClassMetrics {
            name,
            support: cm.support(c),
            accuracy,
            precision,
            sensitivity,
            specificity,
            f1,
            auc,
            degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl Averages {
    fn over(classes: &[ClassMetrics], weight: impl Fn(&ClassMetrics) -> f64) -> Self {
        let mean = |get: &dyn Fn(&ClassMetrics) -> Option<f64>| -> Option<f64> {
            let (mut num, mut den) = (0.0, 0.0);
            for c in classes {
                if let Some(v) = get(c) {
                    num += weight(c) * v;
                    den += weight(c);
                }
            }
            (den > 0.0).then(|| num / den)
        };
        Averages {
            accuracy: mean(&|c| Some(c.accuracy)).unwrap_or(0.0),
            precision: mean(&|c| Some(c.precision)).unwrap_or(0.0),
            sensitivity: mean(&|c| Some(c.sensitivity)).unwrap_or(0.0),
            specificity: mean(&|c| Some(c.specificity)).unwrap_or(0.0),
            f1: mean(&|c| Some(c.f1)).unwrap_or(0.0),
            auc: mean(&|c| c.auc),
        }
    }
}

/// Full evaluation summary of one labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    /// Global top-1 accuracy.
    pub top1_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes. The headline numbers.
    pub macro_avg: Averages,
    /// Support-weighted mean over classes.
    pub weighted_avg: Averages,
    /// Classes left out of the AUC average.
    pub auc_skipped: Vec<String>,
    pub confusion: ConfusionMatrix,
}

/// Index of the first maximum of each row.
pub fn argmax_rows(scores: &[f64], classes: usize) -> Vec<usize> {
    scores
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl MetricsReport {
    /// Evaluate row-major `(n, classes)` scores against labels. Predictions
    /// are the per-row argmax.
    pub fn evaluate(scores: &[f64], labels: &[usize], class_names: &[String]) -> Result<Self> {
        let classes = class_names.len();
        if classes == 0 {
            return Err(Error::InvalidArgument("no classes".into()));
        }
        if scores.len() != labels.len() * classes {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} samples × {classes} classes",
                scores.len(),
                labels.len()
            )));
        }
        let preds = argmax_rows(scores, classes);
        let cm = confusion(labels, &preds, classes)?;
        let auc = if labels.len() >= 2 {
            roc_auc(scores, labels, classes)?
        } else {
            AucReport {
                per_class: vec![None; classes],
                macro_auc: None,
                skipped: (0..classes).collect(),
            }
        };
        Ok(Self::from_parts(cm, &auc, class_names))
    }

    pub fn from_parts(cm: ConfusionMatrix, auc: &AucReport, class_names: &[String]) -> Self {
        let per_class: Vec<ClassMetrics> = (0..cm.classes())
            .map(|c| ClassMetrics::compute(&cm, c, class_names[c].clone(), auc.per_class.get(c).copied().flatten()))
            .collect();
        MetricsReport {
            samples: cm.total(),
            top1_accuracy: accuracy(&cm),
            macro_avg: Averages::over(&per_class, |_| 1.0),
            weighted_avg: Averages::over(&per_class, |c| c.support as f64),
            auc_skipped: auc.skipped.iter().map(|&c| class_names[c].clone()).collect(),
            per_class,
            confusion: cm,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.name.chars().count())
            .chain([8])
            .max()
            .unwrap_or(8);
        let fmt_auc = |a: Option<f64>| a.map_or_else(|| format!("{:>8}", "n/a"), |v| format!("{v:>8.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "class", "support", "acc", "prec", "sens", "spec", "f1", "auc"
        );
        let rule = "-".repeat(width + 8 + 6 * 9);
        let _ = writeln!(out, "{rule}");
        for c in &self.per_class {
            let mark = if c.degenerate.is_empty() { "" } else { " *" };
            let _ = writeln!(
                out,
                "{:<width$} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {}{mark}",
                c.name,
                c.support,
                c.accuracy,
                c.precision,
                c.sensitivity,
                c.specificity,
                c.f1,
                fmt_auc(c.auc)
            );
        }
        let _ = writeln!(out, "{rule}");
        for (label, a) in [("macro", &self.macro_avg), ("weighted", &self.weighted_avg)] {
            let _ = writeln!(
                out,
                "{:<width$} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {}",
                label,
                self.samples,
                a.accuracy,
                a.precision,
                a.sensitivity,
                a.specificity,
                a.f1,
                fmt_auc(a.auc)
            );
        }
        let _ = writeln!(out, "top-1 accuracy {:.4} over {} samples", self.top1_accuracy, self.samples);
        if self.per_class.iter().any(|c| !c.degenerate.is_empty()) {
            let _ = writeln!(out, "* zero denominator reported as 0");
        }
        if !self.auc_skipped.is_empty() {
            let _ = writeln!(out, "auc skipped: {}", self.auc_skipped.join(", "));
        }
        out
    }
}
