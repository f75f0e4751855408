//! Evaluation metrics: confusion matrices, sensitivity/specificity, ROC/AUC,
//! rectangle overlap, k-fold splits and percent agreement.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Rows are true classes, columns predicted classes.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Rows divided by their totals; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion_and_accuracy(truth: &[usize], pred: &[usize], n: usize) -> Result<(ConfusionMatrix, f64)> {
    if truth.len() != pred.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: pred.len() });
    }
    if truth.is_empty() {
        return Err(Error::invalid("no labels to evaluate"));
    }
    let mut counts = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n || p >= n {
            return Err(Error::invalid(format!("label outside 0..{n}")));
        }
        counts[t][p] += 1;
    }
    let cm = ConfusionMatrix { counts };
    let acc = cm.accuracy();
    Ok((cm, acc))
}

/// (TP/(TP+FN), TN/(TN+FP)) for a 2×2 matrix.
pub fn sensitivity_specificity(cm: &ConfusionMatrix, positive: usize) -> Result<(f64, f64)> {
    if cm.n_classes() != 2 || positive > 1 {
        return Err(Error::invalid("sensitivity/specificity need a 2×2 matrix"));
    }
    let negative = 1 - positive;
    let tp = cm.counts[positive][positive] as f64;
    let fneg = cm.counts[positive][negative] as f64;
    let tn = cm.counts[negative][negative] as f64;
    let fp = cm.counts[negative][positive] as f64;
    if tp + fneg == 0.0 {
        return Err(Error::invalid("no positive cases in truth"));
    }
    if tn + fp == 0.0 {
        return Err(Error::invalid("no negative cases in truth"));
    }
    Ok((tp / (tp + fneg), tn / (tn + fp)))
}

/// Sensitivity/specificity from a row-normalized 2×2 matrix.
pub fn sensitivity_specificity_normalized(rows: &[[f64; 2]; 2], positive: usize) -> (f64, f64) {
    let negative = 1 - positive;
    (rows[positive][positive], rows[negative][negative])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (FPR, TPR) from (0,0) to (1,1).
    pub points: Vec<[f64; 2]>,
    /// Threshold at which each point is reached (score ≥ threshold is
    /// positive); +∞ for the origin.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

pub fn roc_auc(truth: &[bool], scores: &[f64]) -> Result<RocCurve> {
    if truth.len() != scores.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: scores.len() });
    }
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    let neg = truth.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::invalid("ROC needs both classes in truth"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![[0.0, 0.0]];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let [x0, y0] = *points.last().expect("origin present");
        let (x1, y1) = (fp / neg, tp / pos);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push([x1, y1]);
        thresholds.push(s);
    }
    Ok(RocCurve { points, thresholds, auc })
}

/// Axis-aligned rectangle in one slice plane (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
}

pub fn rect_overlap(a: &Rect, b: &Rect) -> Result<(f64, f64)> {
    if a.width <= 0.0 || a.height <= 0.0 || b.width <= 0.0 || b.height <= 0.0 {
        return Err(Error::invalid("degenerate rectangle"));
    }
    let overlap = |ca: f64, wa: f64, cb: f64, wb: f64| {
        let lo = (ca - wa / 2.0).max(cb - wb / 2.0);
        let hi = (ca + wa / 2.0).min(cb + wb / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.center[0], a.width, b.center[0], b.width)
        * overlap(a.center[1], a.height, b.center[1], b.height);
    let dice = 2.0 * inter / (a.width * a.height + b.width * b.height);
    let dist = ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt();
    Ok((dice, dist))
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} cases into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::key_of("kfold")]));
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

pub fn percent_agreement<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(Error::invalid("no labels to compare"));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Metrics block for one classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub confusion: Vec<Vec<u64>>,
    pub confusion_normalized: Vec<Vec<f64>>,
    pub accuracy: f64,
    /// Present for two-class tasks with both classes in truth.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Why sensitivity/specificity are absent, if they are.
    pub sensitivity_error: Option<String>,
}

pub fn classification_report(truth: &[usize], pred: &[usize], n: usize) -> Result<ClassificationReport> {
    let (cm, accuracy) = confusion_and_accuracy(truth, pred, n)?;
    let (sensitivity, specificity, sensitivity_error) = if n == 2 {
        match sensitivity_specificity(&cm, 1) {
            Ok((s, p)) => (Some(s), Some(p), None),
            Err(e) => (None, None, Some(e.to_string())),
        }
    } else {
        (None, None, None)
    };
    Ok(ClassificationReport {
        n: truth.len(),
        confusion_normalized: cm.row_normalized(),
        confusion: cm.counts,
        accuracy,
        sensitivity,
        specificity,
        sensitivity_error,
    })
}
