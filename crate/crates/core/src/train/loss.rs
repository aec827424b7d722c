//! Token-level and response-level objectives.

use crate::error::{Error, Result};

/// Probability clamp applied before logarithms.
pub const CLAMP: f64 = 1e-7;

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(CLAMP, 1.0 - CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Gradient of [`bce`] with respect to the logit of `p`; zero where the clamp is active.
fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if !(CLAMP..=1.0 - CLAMP).contains(&p) {
        return 0.0;
    }
    #[cfg(test)]
    if super::mutation::sign_bug() {
        return y - p;
    }
    p - y
}

/// Mean per-token binary cross-entropy.
pub fn tldr_loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::LengthMismatch { left: probabilities.len(), right: labels.len() });
    }
    if probabilities.is_empty() {
        return Err(Error::Empty("response"));
    }
    let total: f64 = probabilities.iter().zip(labels).map(|(&p, &y)| bce(p, y as f64)).sum();
    Ok(total / probabilities.len() as f64)
}

/// Cross-entropy at the last token against ρ* = ∏γ*.
pub fn naive_loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::LengthMismatch { left: probabilities.len(), right: labels.len() });
    }
    let (Some(&p), Some(_)) = (probabilities.last(), labels.last()) else {
        return Err(Error::Empty("response"));
    };
    Ok(bce(p, response_target(labels)))
}

pub fn response_target(labels: &[u8]) -> f64 {
    labels.iter().map(|&y| y as f64).product()
}

/// `dL/dz_k` of [`tldr_loss`] for every token logit.
pub fn tldr_logit_grads(probabilities: &[f64], labels: &[u8]) -> Vec<f64> {
    let n = probabilities.len() as f64;
    probabilities.iter().zip(labels).map(|(&p, &y)| bce_logit_grad(p, y as f64) / n).collect()
}

/// `dL/dz_k` of [`naive_loss`]: nonzero at the final position only.
pub fn naive_logit_grads(probabilities: &[f64], labels: &[u8]) -> Vec<f64> {
    let mut g = vec![0.0; probabilities.len()];
    if let Some(last) = g.last_mut() {
        *last = bce_logit_grad(probabilities[probabilities.len() - 1], response_target(labels));
    }
    g
}
