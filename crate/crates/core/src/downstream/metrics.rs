use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted half. Computed from tie-grouped ranks in integer half-units, so the
/// result is exactly `(2·wins + ties) / (2·P·N)`.
pub fn roc_auc(scores: &[(f64, u8)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = scores.iter().filter(|(_, l)| *l == 1).count() as u64;
    let neg = scores.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "undefined AUC: need at least one positive and one negative",
        ));
    }
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // u2 = 2 · Σ over positives of (#negatives below + ½ #negatives tied)
    let mut u2: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let p = sorted[i..j].iter().filter(|(_, l)| *l == 1).count() as u64;
        let n = (j - i) as u64 - p;
        u2 += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholded {
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
    pub accuracy: f64,
    /// `None` when there are neither positives nor predicted positives.
    pub f1: Option<f64>,
}

/// Metrics with `probability ≥ threshold` predicted positive.
pub fn precision_accuracy_f1(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Thresholded> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let f1 = (2 * tp + fp + fneg > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
    Ok(Thresholded {
        precision,
        accuracy: (tp + tn) as f64 / probs.len() as f64,
        f1,
    })
}

pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub config: String,
    pub split: String,
    pub roc_auc: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: f64,
    pub f1: Option<f64>,
}

impl MetricRow {
    pub fn compute(config: &str, split: &str, probs: &[f64], labels: &[u8]) -> Result<Self> {
        let pairs: Vec<(f64, u8)> = probs.iter().copied().zip(labels.iter().copied()).collect();
        let t = precision_accuracy_f1(probs, labels, 0.5)?;
        Ok(MetricRow {
            config: config.to_string(),
            split: split.to_string(),
            roc_auc: roc_auc(&pairs).ok(),
            precision: t.precision,
            accuracy: t.accuracy,
            f1: t.f1,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.6}"))
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("config,split,roc_auc,precision,accuracy,f1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{}",
            r.config,
            r.split,
            cell(r.roc_auc),
            cell(r.precision),
            r.accuracy,
            cell(r.f1)
        );
    }
    out
}
