//! Training objective: binary cross-entropy plus a mask-diversity penalty.
//!
//! The diversity term is the mean pairwise cosine similarity between the
//! per-sample head weights of a batch, averaged over layers. Every function
//! here has an analytic gradient companion used by the batch trainer.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-12;

/// Default diversity weight.
pub const DEFAULT_ETA: f64 = 0.2;

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a], &[b]));
    }
    if a == 0 {
        return Err(Error::Metric(format!("{op}: empty batch")));
    }
    Ok(())
}

/// Mean binary cross-entropy.
pub fn bce(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_len("bce", probs.len(), labels.len())?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// `∂ bce(σ(z)) / ∂z_i`; zero where the clamp is active.
pub fn bce_logit_grads(logits: &[f64], labels: &[bool]) -> Result<Vec<f64>> {
    check_len("bce", logits.len(), labels.len())?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = crate::numerics::sigmoid(z);
            if !(P_CLAMP..=1.0 - P_CLAMP).contains(&p) {
                0.0
            } else {
                (p - if y { 1.0 } else { 0.0 }) / n
            }
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; `0` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `∂ cos(a, b) / ∂a`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = dot(a, b) / (na * nb);
    a.iter().zip(b).map(|(&x, &y)| y / (na * nb) - c * x / (na * na)).collect()
}

/// Per-layer, per-sample head weights: `weights[l][i]` is `W_{l,i}`.
pub type BatchWeights = [Vec<Vec<f64>>];

fn check_weights(weights: &BatchWeights) -> Result<usize> {
    let n = weights.first().map_or(0, Vec::len);
    if weights.iter().any(|layer| layer.len() != n) {
        return Err(Error::Metric("ragged batch weights".into()));
    }
    Ok(n)
}

/// Mean pairwise cosine over samples, averaged over layers; `0` with one sample.
pub fn diversity_loss(weights: &BatchWeights) -> Result<f64> {
    let n = check_weights(weights)?;
    if n < 2 || weights.is_empty() {
        return Ok(0.0);
    }
    let pairs = (n * (n - 1)) as f64;
    let total: f64 = weights
        .iter()
        .map(|layer| {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += 2.0 * cosine(&layer[i], &layer[j]);
                }
            }
            s / pairs
        })
        .sum();
    Ok(total / weights.len() as f64)
}

/// Gradient of [`diversity_loss`] with respect to every `W_{l,i}`.
pub fn diversity_grads(weights: &BatchWeights) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = check_weights(weights)?;
    let mut grads: Vec<Vec<Vec<f64>>> = weights
        .iter()
        .map(|layer| layer.iter().map(|w| vec![0.0; w.len()]).collect())
        .collect();
    if n < 2 {
        return Ok(grads);
    }
    let scale = 2.0 / ((n * (n - 1)) as f64 * weights.len() as f64);
    for (layer, g) in weights.iter().zip(&mut grads) {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    for (gi, d) in g[i].iter_mut().zip(cosine_grad(&layer[i], &layer[j])) {
                        *gi += scale * d;
                    }
                }
            }
        }
    }
    Ok(grads)
}

pub fn total_loss(ce: f64, div: f64, eta: f64) -> f64 {
    ce + eta * div
}
