//! Gaussian mechanism on client updates: L2 clipping, calibrated noise and
//! signal-to-noise diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::config("privacy.epsilon", "must be finite and positive"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config("privacy.delta", "must lie in (0, 1)"));
        }
        Ok(Self { epsilon, delta })
    }

    /// Sequential composition over `rounds` releases: `(rounds * eps,
    /// rounds * delta)`. Reported as a diagnostic only; the total delta may
    /// exceed 1 for long runs.
    pub fn compose_sequential(&self, rounds: usize) -> (f64, f64) {
        (self.epsilon * rounds as f64, self.delta * rounds as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_threshold: f64,
    pub noise_scale: f64,
    pub enabled: bool,
}

impl DpConfig {
    pub fn from_budget(budget: PrivacyBudget, clip_threshold: f64) -> Result<Self> {
        let cfg = Self { clip_threshold, noise_scale: noise_scale(budget), enabled: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0) || !self.clip_threshold.is_finite() {
            return Err(Error::config("privacy.clip_threshold", "must be finite and positive"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("privacy.noise_scale", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Per-coordinate noise standard deviation `sigma * C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_scale * self.clip_threshold
    }
}

/// `sigma = sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn noise_scale(budget: PrivacyBudget) -> f64 {
    (2.0 * (1.25 / budget.delta).ln()).sqrt() / budget.epsilon
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projects `v` onto the L2 ball of radius `c`.
pub fn clip(v: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm <= c {
        v.to_vec()
    } else {
        let scale = c / norm;
        v.iter().map(|x| x * scale).collect()
    }
}

/// Clips, then adds i.i.d. `N(0, (sigma C)^2)` noise per coordinate. With
/// `enabled == false` the update passes through untouched.
pub fn privatize(update: &[f64], cfg: &DpConfig, stream: &mut Stream) -> Vec<f64> {
    if !cfg.enabled {
        return update.to_vec();
    }
    let mut out = clip(update, cfg.clip_threshold);
    let std = cfg.noise_std();
    if std > 0.0 {
        out.iter_mut().for_each(|x| *x += std * stream.normal());
    }
    out
}

/// `|clean| / |noisy - clean|`; infinite when the two coincide.
pub fn gradient_snr(clean: &[f64], noisy: &[f64]) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::DimensionMismatch { context: "snr", expected: clean.len(), found: noisy.len() });
    }
    let noise = clean.iter().zip(noisy).map(|(c, n)| (n - c) * (n - c)).sum::<f64>().sqrt();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(l2_norm(clean) / noise)
}
