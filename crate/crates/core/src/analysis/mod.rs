//! Closed-form bounds, fits of the theoretical forms to run output and the
//! operational zone table.

mod estimate;
mod fit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use estimate::{
    estimate_theory_params, gamma_from_divergence, gradient_variance, penalty_slope, smoothness, TheoryEstimate, TheoryInputs,
};
pub use fit::{
    compare_linearity, fit_convergence_rate, levenberg_marquardt, ols, piecewise_fit, violation_fit, r_squared, FitResult,
    LinearityComparison, LmOptions, ResidualSummary, ViolationFit, BOOTSTRAP_RESAMPLES,
};

/// Constants of the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Smoothness `L`.
    pub smoothness: f64,
    pub sigma_sq: f64,
    /// Gradient divergence `D`.
    pub heterogeneity: f64,
    /// `L_c`.
    pub constraint_smoothness: f64,
    /// Heterogeneity reduction factor in `[0, 1)`.
    pub gamma: f64,
    /// `F(w0) - F*`.
    pub f0_gap: f64,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub num_clients: usize,
    pub rounds: usize,
    #[serde(default)]
    pub delta_max: f64,
    #[serde(default)]
    pub eps_opt: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("smoothness", self.smoothness),
            ("sigma_sq", self.sigma_sq),
            ("heterogeneity", self.heterogeneity),
            ("constraint_smoothness", self.constraint_smoothness),
            ("f0_gap", self.f0_gap),
            ("learning_rate", self.learning_rate),
            ("delta_max", self.delta_max),
            ("eps_opt", self.eps_opt),
        ];
        for (name, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("theory.{name}"), "must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("theory.gamma", "must lie in [0, 1)"));
        }
        if self.learning_rate == 0.0 || self.local_epochs == 0 || self.num_clients == 0 || self.rounds == 0 {
            return Err(Error::config("theory", "learning rate, epochs, clients and rounds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub optimization: f64,
    pub variance: f64,
    pub drift: f64,
    pub violation: f64,
    pub total: f64,
    /// `eta <= 1 / (L E)`.
    pub step_condition_holds: bool,
}

/// Term-by-term evaluation of
/// `2 gap / (eta T) + 2 L eta E^2 sigma^2 / K + 2 L^2 eta^2 E^2 D^2 + rho L_c D`.
pub fn bound_terms(p: &TheoryParams, rho: f64) -> BoundTerms {
    let eta = p.learning_rate;
    let e = p.local_epochs as f64;
    let l = p.smoothness;
    let d = p.heterogeneity;
    let optimization = 2.0 * p.f0_gap / (eta * p.rounds as f64);
    let variance = 2.0 * l * eta * e * e * p.sigma_sq / p.num_clients as f64;
    let drift = 2.0 * l * l * eta * eta * e * e * d * d;
    let violation = rho * p.constraint_smoothness * d;
    let step_condition_holds = eta * l * e <= 1.0;
    if !step_condition_holds {
        log::warn!("step size {eta} exceeds 1/(L E) = {}", 1.0 / (l * e));
    }
    BoundTerms {
        optimization,
        variance,
        drift,
        violation,
        total: optimization + variance + drift + violation,
        step_condition_holds,
    }
}

/// Bound on the average squared gradient norm over `T` rounds.
pub fn convergence_bound(p: &TheoryParams, rho: f64) -> f64 {
    bound_terms(p, rho).total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub applies: bool,
    pub lower_bound: f64,
    /// `gamma D / (L_c sqrt(T))`.
    pub rho_limit: f64,
}

/// Speedup lower bound `gamma D / (L_c rho)`, applicable when
/// `rho < gamma D / (L_c sqrt(T))`.
pub fn speedup_condition(p: &TheoryParams, rho: f64) -> Result<Speedup> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Input(format!("violation rate {rho} must lie in (0, 1]")));
    }
    if !(p.constraint_smoothness > 0.0) {
        return Err(Error::Input("constraint smoothness must be positive".into()));
    }
    let num = p.gamma * p.heterogeneity;
    let rho_limit = num / (p.constraint_smoothness * (p.rounds as f64).sqrt());
    Ok(Speedup {
        applies: rho < rho_limit,
        lower_bound: num / (p.constraint_smoothness * rho),
        rho_limit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Safe,
    Warning,
    Danger,
    Critical,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::Safe, Zone::Warning, Zone::Danger, Zone::Critical];

    pub fn name(&self) -> &'static str {
        match self {
            Zone::Safe => "safe",
            Zone::Warning => "warning",
            Zone::Danger => "danger",
            Zone::Critical => "critical",
        }
    }

    pub fn action(&self) -> &'static str {
        match self {
            Zone::Safe => "normal operation",
            Zone::Warning => "monitor closely",
            Zone::Danger => "tighten constraints",
            Zone::Critical => "immediate intervention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperationalZone {
    pub zone: Zone,
    pub rho: f64,
}

pub const WARNING_THRESHOLD: f64 = 0.05;
pub const DANGER_THRESHOLD: f64 = 0.10;
pub const CRITICAL_THRESHOLD: f64 = 0.18;

/// Half-open bands `[0, 0.05) [0.05, 0.10) [0.10, 0.18) [0.18, 1]`.
pub fn classify_zone(rho: f64) -> Result<OperationalZone> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Input(format!("violation rate {rho} outside [0, 1]")));
    }
    let zone = if rho < WARNING_THRESHOLD {
        Zone::Safe
    } else if rho < DANGER_THRESHOLD {
        Zone::Warning
    } else if rho < CRITICAL_THRESHOLD {
        Zone::Danger
    } else {
        Zone::Critical
    };
    Ok(OperationalZone { zone, rho })
}

/// Relative metric drop in percent.
pub fn utility_loss(private_metric: f64, nonprivate_metric: f64) -> Result<f64> {
    if !(nonprivate_metric > 0.0) {
        return Err(Error::Input(format!("non-private metric {nonprivate_metric} must be positive")));
    }
    Ok(100.0 * (nonprivate_metric - private_metric) / nonprivate_metric)
}
