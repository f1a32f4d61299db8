//! Estimators for the constants of the convergence bound from run output.
//! These are measurement procedures of our own, not reproductions of any
//! published procedure.

use serde::{Deserialize, Serialize};

use crate::data::{self, ClientDataset};
use crate::engine::{ExperimentOutput, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::rng::{Phase, Stream};

use super::TheoryParams;

/// `gamma = 1 - (d_constrained / d_unconstrained)^2`, clamped into
/// `[0, 1)`. The flag is set when clamping changed the value.
pub fn gamma_from_divergence(d_constrained: f64, d_unconstrained: f64) -> Result<(f64, bool)> {
    if !(d_unconstrained > 0.0) || !(d_constrained >= 0.0) {
        return Err(Error::Input("divergences must be non-negative with a positive baseline".into()));
    }
    let raw = 1.0 - (d_constrained / d_unconstrained).powi(2);
    let clamped = raw.clamp(0.0, 1.0 - f64::EPSILON);
    Ok((clamped, clamped != raw))
}

fn pooled_gradient(spec: &ModelSpec, w: &[f64], data: &[Example]) -> Result<Vec<f64>> {
    Ok(model::gradient_of(spec, w, data.iter())?.values)
}

/// Largest Hessian eigenvalue of the mean loss over `data` at `at`, by power
/// iteration on central-difference Hessian-vector products.
pub fn smoothness(spec: &ModelSpec, data: &[Example], at: &ParamVector, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("data", "smoothness estimate needs data"));
    }
    let d = spec.param_count();
    let w = at.as_slice();
    let h = 1e-4 * (1.0 + w.iter().map(|v| v * v).sum::<f64>().sqrt());
    let hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let gp = pooled_gradient(spec, &plus, data)?;
        let gm = pooled_gradient(spec, &minus, data)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    };
    let mut s = Stream::for_phase(seed, Phase::Diagnostics, 0, 0);
    let mut v: Vec<f64> = (0..d).map(|_| s.normal()).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let hv = hvp(&v)?;
        let rayleigh: f64 = hv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let n = norm(&hv);
        if n == 0.0 {
            return Ok(0.0);
        }
        v = hv.into_iter().map(|x| x / n).collect();
        if (rayleigh - lambda).abs() <= 1e-10 * rayleigh.abs().max(1e-12) {
            return Ok(rayleigh.max(0.0));
        }
        lambda = rayleigh;
    }
    Ok(lambda.max(0.0))
}

/// Mean of `|g_B - grad F|^2` over `draws` minibatches of size `b` drawn
/// without replacement from `data`. Exactly zero when `b >= n`.
pub fn gradient_variance(spec: &ModelSpec, data: &[Example], at: &ParamVector, batch_size: usize, draws: usize, seed: u64) -> Result<f64> {
    if data.is_empty() || batch_size == 0 || draws == 0 {
        return Err(Error::config("data", "variance estimate needs data, a batch size and draws"));
    }
    let n = data.len();
    if batch_size >= n {
        return Ok(0.0);
    }
    let full = pooled_gradient(spec, at.as_slice(), data)?;
    let mut s = Stream::for_phase(seed, Phase::Diagnostics, 1, 0);
    let mut scratch = Vec::new();
    let mut total = 0.0;
    for _ in 0..draws {
        let idx = s.sample_indices(n, batch_size, &mut scratch);
        let g = model::gradient_of(spec, at.as_slice(), idx.iter().map(|&i| &data[i]))?.values;
        total += g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / draws as f64)
}

/// Least-squares slope through the origin of `residuals` on `regressors`.
pub fn penalty_slope(residuals: &[f64], regressors: &[f64]) -> Option<f64> {
    let sxx: f64 = regressors.iter().map(|x| x * x).sum();
    if residuals.len() != regressors.len() || sxx == 0.0 {
        return None;
    }
    Some(residuals.iter().zip(regressors).map(|(r, x)| r * x).sum::<f64>() / sxx)
}

pub struct TheoryInputs<'a> {
    pub spec: &'a ModelSpec,
    pub clients: &'a [ClientDataset],
    pub train: &'a TrainConfig,
    pub initial: &'a ParamVector,
    /// Run without constraint weighting.
    pub baseline: Option<&'a ExperimentOutput>,
    /// Constraint-weighted run on the same federation.
    pub constrained: Option<&'a ExperimentOutput>,
    /// Optimal objective value; the lowest observed global loss otherwise.
    pub f_star: Option<f64>,
    pub variance_draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryEstimate {
    pub smoothness: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub heterogeneity: Option<f64>,
    pub heterogeneity_baseline: Option<f64>,
    pub constraint_smoothness: Option<f64>,
    pub gamma: Option<f64>,
    pub f0_gap: Option<f64>,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub num_clients: usize,
    pub rounds: usize,
    /// Names of quantities that could not be estimated.
    pub missing: Vec<String>,
    /// Names of quantities clamped into their valid range.
    pub clamped: Vec<String>,
}

impl TheoryEstimate {
    /// Complete parameter set, or an error naming the first missing value.
    pub fn to_params(&self) -> Result<TheoryParams> {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Input(format!("{name} was not estimated")));
        let p = TheoryParams {
            smoothness: need(self.smoothness, "smoothness")?,
            sigma_sq: need(self.sigma_sq, "sigma_sq")?,
            heterogeneity: need(self.heterogeneity, "heterogeneity")?,
            constraint_smoothness: need(self.constraint_smoothness, "constraint_smoothness")?,
            gamma: need(self.gamma, "gamma")?,
            f0_gap: need(self.f0_gap, "f0_gap")?,
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            num_clients: self.num_clients,
            rounds: self.rounds,
            delta_max: 0.0,
            eps_opt: 0.0,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Estimates the bound constants from a baseline and a constrained run.
///
/// * `D`: gradient divergence at each run's final global model.
/// * `gamma`: from the two divergences.
/// * `L`: top Hessian eigenvalue of the pooled loss, maximized over the
///   initial and final models.
/// * `sigma^2`: minibatch gradient variance at the initial model.
/// * `L_c`: slope through the origin of the per-round gradient-norm excess
///   of the constrained run over the baseline, against `rho_t * D`.
pub fn estimate_theory_params(inp: &TheoryInputs<'_>) -> Result<TheoryEstimate> {
    let pooled: Vec<Example> = inp.clients.iter().flat_map(|c| c.examples().iter().cloned()).collect();
    let mut missing = Vec::new();
    let mut clamped = Vec::new();

    let divergence = |out: Option<&ExperimentOutput>| -> Result<Option<f64>> {
        out.map(|o| data::heterogeneity_report(inp.clients, inp.spec, &o.final_params).map(|r| r.gradient_divergence))
            .transpose()
    };
    let heterogeneity = divergence(inp.constrained)?;
    let heterogeneity_baseline = divergence(inp.baseline)?;
    if heterogeneity.is_none() {
        missing.push("heterogeneity".to_string());
    }

    let gamma = match (heterogeneity, heterogeneity_baseline) {
        (Some(dc), Some(du)) if du > 0.0 => {
            let (g, was_clamped) = gamma_from_divergence(dc, du)?;
            if was_clamped {
                clamped.push("gamma".to_string());
            }
            Some(g)
        }
        _ => {
            missing.push("gamma".to_string());
            None
        }
    };

    let smoothness = if pooled.is_empty() {
        missing.push("smoothness".to_string());
        None
    } else {
        let mut best = smoothness(inp.spec, &pooled, inp.initial, inp.seed)?;
        for out in [inp.baseline, inp.constrained].into_iter().flatten() {
            best = best.max(smoothness(inp.spec, &pooled, &out.final_params, inp.seed)?);
        }
        Some(best)
    };

    let sigma_sq = if pooled.is_empty() {
        missing.push("sigma_sq".to_string());
        None
    } else {
        Some(gradient_variance(inp.spec, &pooled, inp.initial, inp.train.batch_size, inp.variance_draws.max(1), inp.seed)?)
    };

    let constraint_smoothness = match (inp.baseline, inp.constrained, heterogeneity) {
        (Some(base), Some(con), Some(d)) => {
            let (res, reg): (Vec<f64>, Vec<f64>) = con
                .records
                .iter()
                .zip(&base.records)
                .map(|(c, b)| (c.grad_norm_sq - b.grad_norm_sq, c.rho * d))
                .unzip();
            match penalty_slope(&res, &reg) {
                Some(v) if v < 0.0 => {
                    clamped.push("constraint_smoothness".to_string());
                    Some(0.0)
                }
                Some(v) => Some(v),
                None => {
                    missing.push("constraint_smoothness".to_string());
                    None
                }
            }
        }
        _ => {
            missing.push("constraint_smoothness".to_string());
            None
        }
    };

    let observed_min = [inp.baseline, inp.constrained]
        .into_iter()
        .flatten()
        .flat_map(|o| o.records.iter().map(|r| r.global_loss))
        .fold(f64::INFINITY, f64::min);
    let f_star = inp.f_star.or(observed_min.is_finite().then_some(observed_min));
    let f0_gap = match f_star {
        Some(fs) => {
            let f0 = model::global_objective(inp.spec, inp.initial, inp.clients)?;
            Some((f0 - fs).max(0.0))
        }
        None => {
            missing.push("f0_gap".to_string());
            None
        }
    };

    Ok(TheoryEstimate {
        smoothness,
        sigma_sq,
        heterogeneity,
        heterogeneity_baseline,
        constraint_smoothness,
        gamma,
        f0_gap,
        learning_rate: inp.train.learning_rate,
        local_epochs: inp.train.local_epochs,
        num_clients: inp.clients.len(),
        rounds: inp.train.rounds,
        missing,
        clamped,
    })
}
