//! Accuracy and average precision over scored binary predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

/// Fraction of samples where `score > threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("accuracy", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s > threshold) == y).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean of precision at the rank of each positive. Scores are sorted
/// descending; equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("average_precision", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut positives = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            positives += 1;
            sum += positives as f64 / (rank + 1) as f64;
        }
    }
    if positives == 0 {
        return Err(Error::Metric("average precision is undefined without positives".into()));
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ap: f64,
    pub n: usize,
    pub threshold: f64,
    pub perturbation: String,
    pub seed: u64,
}
