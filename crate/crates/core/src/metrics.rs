//! Binary classification metrics computed from scratch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// (FPR, TPR), starting at (0, 0) and ending at (1, 1).
    pub points: Vec<(f64, f64)>,
    /// Score cut producing each point; the first is `+inf`.
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5).sum()
    }

    /// Two whitespace-separated columns, `fpr tpr`, one point per line.
    pub fn to_text(&self) -> String {
        self.points.iter().map(|(f, t)| format!("{f:.17e} {t:.17e}\n")).collect()
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::invalid(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Sweeps thresholds over the distinct scores in descending order. Tied
/// scores move the curve as one diagonal step.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let cut = scores[order[i]];
        while i < order.len() && scores[order[i]] == cut {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(cut);
    }
    Ok(RocCurve { points, thresholds })
}

pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.area())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auroc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    /// Names of ratios whose denominator was zero; those are reported as 0.
    pub undefined: Vec<String>,
}

pub fn classification_metrics(cm: &ConfusionMatrix, auroc_value: f64, threshold: f64) -> MetricSet {
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio("precision", cm.tp, cm.tp + cm.fp);
    let recall = ratio("recall", cm.tp, cm.tp + cm.fn_);
    let specificity = ratio("specificity", cm.tn, cm.tn + cm.fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".to_string());
        0.0
    };
    MetricSet { auroc: auroc_value, f1, precision, recall, specificity, threshold, confusion: *cm, undefined }
}

/// AUROC plus thresholded metrics in one call.
pub fn evaluate_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricSet> {
    let area = auroc(scores, labels)?;
    let cm = confusion(scores, labels, threshold)?;
    Ok(classification_metrics(&cm, area, threshold))
}
