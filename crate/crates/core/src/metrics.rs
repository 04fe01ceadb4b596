//! Confusion counts, accuracy, ROC curves and AUC.
//!
//! A score counts as a positive prediction when `score >= threshold`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::argument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::argument(format!("labels must be 0 or 1, found {bad}")));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::argument(format!("score {bad} is not a number")));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// `(TP + TN) / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::argument("accuracy of an empty confusion matrix")),
        n => Ok((cm.tp + cm.tn) as f64 / n as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// `+∞` for the first point.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from a threshold sweep: `+∞`, then every distinct score in
/// descending order. Tied scores move together, giving diagonal segments.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> Result<f64> {
    let p = &curve.points;
    if p.len() < 2 {
        return Err(Error::Degenerate("ROC curve needs at least two points".into()));
    }
    Ok(p.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
        .sum())
}

/// Rank-statistic AUC by brute force over all positive/negative pairs:
/// `(concordant + 0.5·tied) / (n_pos·n_neg)`.
pub fn auc_rank_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut twice = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                twice += 2;
            } else if si == sj {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Convenience: `auc(roc_curve(scores, labels))`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    auc(&roc_curve(scores, labels)?)
}

/// Rows `threshold,fpr,tpr` with a header; the first threshold is `inf`.
pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}
