//! Round-by-round execution of constraint-weighted federated aggregation and
//! the baseline algorithms over an in-process federation.
//!
//! One round of the federated variants:
//! 1. sample a client subset (`sample_clients`);
//! 2. each sampled client runs `E` local SGD steps from the broadcast model
//!    and reports its delta (`local_train`); with differential privacy
//!    enabled the delta is clipped and noised before leaving the client;
//! 3. the server evaluates the constraint set at `w + delta_k` for every
//!    client (`validate_round`);
//! 4. deltas are combined with weights `n_k s_k / sum_j n_j s_j`
//!    (constraint-weighted) or `n_k / sum_j n_j` (every baseline), summed
//!    in ascending client-id order (`aggregate`).
//!
//! Every random draw comes from a stream keyed by
//! `(master_seed, phase, client, round)`, so client scheduling cannot change
//! results.

mod aggregate;
mod local;
mod record;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, ConstraintSet, ValidityReport};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::privacy::{self, DpConfig};
use crate::rng::{Phase, Stream};

pub use aggregate::{aggregate, aggregation_weights, Aggregate, ServerState};
pub use local::{local_train, ClientUpdate, ControlVariates};
pub use record::{read_rounds_csv, write_rounds_csv, RoundRow, ROUNDS_CSV_COLUMNS};

fn default_mu() -> f64 {
    0.01
}
fn default_server_lr() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum AlgorithmVariant {
    #[serde(rename = "scfa")]
    Scfa,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    #[serde(rename = "scaffold")]
    Scaffold,
    #[serde(rename = "fedadam")]
    FedAdam {
        #[serde(default = "default_server_lr")]
        server_lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        epsilon: f64,
    },
    #[serde(rename = "local-only")]
    LocalOnly,
    #[serde(rename = "centralized")]
    Centralized,
}

impl AlgorithmVariant {
    pub fn fedprox() -> Self {
        Self::FedProx { mu: default_mu() }
    }

    pub fn fedadam() -> Self {
        Self::FedAdam {
            server_lr: default_server_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Scfa => "scfa",
            Self::FedAvg => "fedavg",
            Self::FedProx { .. } => "fedprox",
            Self::Scaffold => "scaffold",
            Self::FedAdam { .. } => "fedadam",
            Self::LocalOnly => "local-only",
            Self::Centralized => "centralized",
        }
    }

    /// Whether aggregation weights use validity scores.
    pub fn uses_validity(&self) -> bool {
        matches!(self, Self::Scfa)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::FedProx { mu } if !(mu >= 0.0) => Err(Error::config("variant.mu", "must be non-negative")),
            Self::FedAdam { server_lr, beta1, beta2, epsilon } => {
                if !(server_lr > 0.0) {
                    return Err(Error::config("variant.server_lr", "must be positive"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("variant.beta", "moment decays must lie in [0, 1)"));
                }
                if !(epsilon > 0.0) {
                    return Err(Error::config("variant.epsilon", "must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_sample_rate: f64,
    pub learning_rate: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    pub batch_size: usize,
    #[serde(default)]
    pub master_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("training.local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.client_sample_rate > 0.0 && self.client_sample_rate <= 1.0) {
            return Err(Error::config("training.client_sample_rate", "must lie in (0, 1]"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("training.learning_rate", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Local step size for round `t` (1-based):
    /// `eta * 0.5 * (1 + cos(pi * (t - 1) / T))` with cosine decay.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        if !self.cosine_decay || self.rounds == 0 {
            return self.learning_rate;
        }
        let frac = (t.saturating_sub(1)) as f64 / self.rounds as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Number of clients sampled per round out of `k`.
    pub fn clients_per_round(&self, k: usize) -> usize {
        ((self.client_sample_rate * k as f64 + 1e-9).floor() as usize).clamp(1, k.max(1))
    }
}

/// Differential-privacy settings for a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacySettings {
    pub dp: Option<DpConfig>,
    /// Validate the clipped, pre-noise delta instead of what the server
    /// receives.
    #[serde(default)]
    pub validate_before_noise: bool,
}

impl PrivacySettings {
    fn active(&self) -> Option<&DpConfig> {
        self.dp.as_ref().filter(|d| d.enabled)
    }
}

/// Everything a single run needs.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    pub spec: &'a ModelSpec,
    pub clients: &'a [ClientDataset],
    pub holdout: &'a [Example],
    pub constraints: &'a ConstraintSet,
    pub privacy: &'a PrivacySettings,
    pub train: &'a TrainConfig,
    pub variant: &'a AlgorithmVariant,
    /// Starting model; `model::initial_params` when absent.
    pub initial: Option<&'a ParamVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub validity: Vec<f64>,
    pub weights: Vec<f64>,
    pub rho: f64,
    pub grad_norm_sq: f64,
    pub global_loss: f64,
    pub metric: f64,
    /// Aggregate signal-to-noise ratio; only with privacy enabled.
    pub snr: Option<f64>,
    /// All validity scores were zero; the model was left unchanged.
    pub degenerate: bool,
    pub diverged: Vec<usize>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RoundRecord {
    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| RoundRecord { wall_time_secs: 0.0, ..r.clone() };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
    /// Per-client models for the local-only baseline.
    pub local_models: Option<Vec<ParamVector>>,
}

/// `floor(rate * K)` (at least one) distinct client ids, ascending.
pub fn sample_clients(k: usize, rate: f64, round: usize, master_seed: u64) -> Vec<usize> {
    let cfg = TrainConfig {
        rounds: 0,
        local_epochs: 1,
        client_sample_rate: rate,
        learning_rate: 0.0,
        cosine_decay: false,
        batch_size: 1,
        master_seed,
    };
    let m = cfg.clients_per_round(k);
    if m >= k {
        return (0..k).collect();
    }
    let mut s = Stream::for_phase(master_seed, Phase::Sampling, 0, round as u64);
    let mut picked = s.sample_indices(k, m, &mut Vec::new());
    picked.sort_unstable();
    picked
}

/// Evaluates the constraint set at `w_t + delta_k` for every update.
pub fn validate_round(updates: &[ClientUpdate], w_t: &ParamVector, set: &ConstraintSet, spec: &ModelSpec) -> Result<Vec<ValidityReport>> {
    if updates.is_empty() {
        return Err(Error::config("updates", "validation needs at least one update"));
    }
    updates
        .iter()
        .map(|u| {
            let temp = w_t.offset(&u.delta)?;
            let mut report = constraints::validity_score(set, spec, &temp)?;
            report.client_id = u.client_id;
            Ok(report)
        })
        .collect()
}

/// Held-out score: F1 at threshold 0.5 for classifiers, coefficient of
/// determination for linear regression.
pub fn evaluate_metric(spec: &ModelSpec, params: &ParamVector, holdout: &[Example]) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::config("data.holdout_fraction", "held-out split is empty"));
    }
    let preds = holdout
        .iter()
        .map(|e| model::predict(spec, params, &e.features))
        .collect::<Result<Vec<f64>>>()?;
    if spec.is_classifier() {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (p, e) in preds.iter().zip(holdout) {
            match (*p >= 0.5, e.label >= 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        Ok(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fne) as f64 })
    } else {
        let mean = holdout.iter().map(|e| e.label).sum::<f64>() / holdout.len() as f64;
        let ss_tot: f64 = holdout.iter().map(|e| (e.label - mean).powi(2)).sum();
        let ss_res: f64 = preds.iter().zip(holdout).map(|(p, e)| (e.label - p).powi(2)).sum();
        Ok(if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot })
    }
}

/// First round whose metric reaches 90% of the run's final metric.
pub fn rounds_to_convergence(records: &[RoundRecord]) -> Option<usize> {
    let last = records.last()?.metric;
    let threshold = 0.9 * last;
    records.iter().find(|r| r.metric >= threshold).map(|r| r.round)
}

struct GlobalEval {
    grad_norm_sq: f64,
    loss: f64,
    metric: f64,
}

fn eval_global(exp: &Experiment<'_>, w: &ParamVector) -> Result<GlobalEval> {
    let (g, _) = model::global_gradient(exp.spec, w, exp.clients)?;
    Ok(GlobalEval {
        grad_norm_sq: g.iter().map(|v| v * v).sum(),
        loss: model::global_objective(exp.spec, w, exp.clients)?,
        metric: evaluate_metric(exp.spec, w, exp.holdout)?,
    })
}

fn check_experiment(exp: &Experiment<'_>) -> Result<ParamVector> {
    exp.spec.validate()?;
    exp.train.validate()?;
    exp.variant.validate()?;
    if let Some(dp) = &exp.privacy.dp {
        dp.validate()?;
    }
    if exp.clients.is_empty() {
        return Err(Error::config("partition.num_clients", "at least one client is required"));
    }
    if exp.holdout.is_empty() {
        return Err(Error::config("data.holdout_fraction", "held-out split is empty"));
    }
    let d = exp.spec.param_count();
    let init = match exp.initial {
        Some(w) => w.clone(),
        None => model::initial_params(exp.spec, exp.train.master_seed),
    };
    if init.len() != d {
        return Err(Error::DimensionMismatch { context: "initial params", expected: d, found: init.len() });
    }
    for c in exp.constraints.constraints() {
        for probe in &c.probes {
            if probe.len() != exp.spec.input_dim {
                return Err(Error::DimensionMismatch {
                    context: "constraint probe",
                    expected: exp.spec.input_dim,
                    found: probe.len(),
                });
            }
        }
    }
    Ok(init)
}

/// Runs `T` rounds of the configured variant.
pub fn run_experiment(exp: &Experiment<'_>) -> Result<ExperimentOutput> {
    let init = check_experiment(exp)?;
    match exp.variant {
        AlgorithmVariant::LocalOnly => run_local_only(exp, init),
        AlgorithmVariant::Centralized => run_centralized(exp, init),
        _ => run_federated(exp, init),
    }
}

fn run_federated(exp: &Experiment<'_>, init: ParamVector) -> Result<ExperimentOutput> {
    let cfg = exp.train;
    let k = exp.clients.len();
    let d = exp.spec.param_count();
    let mut w = init;
    let mut server = ServerState::new(exp.variant, k, d);
    let dp = exp.privacy.active().copied();
    let mut records = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(t);
        let sampled = sample_clients(k, cfg.client_sample_rate, t, cfg.master_seed);

        let results: Vec<Result<ClientUpdate>> = sampled
            .par_iter()
            .map(|&id| {
                let mut stream = Stream::for_phase(cfg.master_seed, Phase::Minibatch, id as u64, t as u64);
                let control = server.control_variates(id);
                local_train(exp.spec, &exp.clients[id], &w, cfg, lr, exp.variant, control, &mut stream)
            })
            .collect();

        let mut updates = Vec::with_capacity(results.len());
        let mut diverged = Vec::new();
        for (id, r) in sampled.iter().zip(results) {
            match r {
                Ok(u) => updates.push(u),
                Err(Error::Diverged { client }) => {
                    log::warn!("round {t}: client {client} diverged and was dropped");
                    diverged.push(*id);
                }
                Err(e) => return Err(e),
            }
        }

        if matches!(exp.variant, AlgorithmVariant::Scaffold) {
            server.update_client_variates(&updates, cfg.local_epochs, lr);
        }

        // What leaves the client: the raw delta, or its clipped + noised form.
        let (sent, clipped): (Vec<ClientUpdate>, Option<Vec<Vec<f64>>>) = match dp {
            Some(dp) => {
                let clipped: Vec<Vec<f64>> = updates.iter().map(|u| privacy::clip(&u.delta, dp.clip_threshold)).collect();
                let sent = updates
                    .iter()
                    .map(|u| {
                        let mut s = Stream::for_phase(cfg.master_seed, Phase::Noise, u.client_id as u64, t as u64);
                        ClientUpdate { delta: privacy::privatize(&u.delta, &dp, &mut s), ..u.clone() }
                    })
                    .collect();
                (sent, Some(clipped))
            }
            None => (updates.clone(), None),
        };

        let mut record = RoundRecord {
            round: t,
            participants: sent.iter().map(|u| u.client_id).collect(),
            validity: Vec::new(),
            weights: Vec::new(),
            rho: 0.0,
            grad_norm_sq: 0.0,
            global_loss: 0.0,
            metric: 0.0,
            snr: None,
            degenerate: false,
            diverged,
            wall_time_secs: 0.0,
        };

        if sent.is_empty() {
            record.degenerate = true;
        } else {
            let to_validate: Vec<ClientUpdate> = match (&clipped, exp.privacy.validate_before_noise) {
                (Some(c), true) => sent.iter().zip(c).map(|(u, d)| ClientUpdate { delta: d.clone(), ..u.clone() }).collect(),
                _ => sent.clone(),
            };
            let reports = validate_round(&to_validate, &w, exp.constraints, exp.spec)?;
            record.validity = reports.iter().map(|r| r.score).collect();
            record.rho = constraints::violation_rate(&reports)?;
            match aggregate(&sent, &reports, exp.variant) {
                Ok(agg) => {
                    if let Some(clean) = &clipped {
                        let mut clean_sum = vec![0.0; d];
                        for (a, c) in agg.weights.iter().zip(clean) {
                            clean_sum.iter_mut().zip(c).for_each(|(s, v)| *s += a * v);
                        }
                        record.snr = Some(privacy::gradient_snr(&clean_sum, &agg.delta)?);
                    }
                    w = server.apply(exp.variant, &w, &agg)?;
                    record.weights = agg.weights;
                }
                Err(Error::DegenerateRound) => {
                    log::warn!("round {t}: all validity scores are zero; model unchanged");
                    record.degenerate = true;
                    record.weights = vec![0.0; sent.len()];
                }
                Err(e) => return Err(e),
            }
        }

        let eval = eval_global(exp, &w)?;
        record.grad_norm_sq = eval.grad_norm_sq;
        record.global_loss = eval.loss;
        record.metric = eval.metric;
        record.wall_time_secs = started.elapsed().as_secs_f64();
        records.push(record);
    }
    Ok(ExperimentOutput { records, final_params: w, local_models: None })
}

fn run_local_only(exp: &Experiment<'_>, init: ParamVector) -> Result<ExperimentOutput> {
    let cfg = exp.train;
    let k = exp.clients.len();
    let mut models = vec![init; k];
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(t);
        let results: Vec<Result<ClientUpdate>> = (0..k)
            .into_par_iter()
            .map(|id| {
                let mut stream = Stream::for_phase(cfg.master_seed, Phase::Minibatch, id as u64, t as u64);
                local_train(exp.spec, &exp.clients[id], &models[id], cfg, lr, exp.variant, None, &mut stream)
            })
            .collect();
        let mut diverged = Vec::new();
        for (id, r) in results.into_iter().enumerate() {
            match r {
                Ok(u) => models[id] = models[id].offset(&u.delta)?,
                Err(Error::Diverged { .. }) => diverged.push(id),
                Err(e) => return Err(e),
            }
        }
        let mut reports = Vec::with_capacity(k);
        let (mut g, mut l, mut m) = (0.0, 0.0, 0.0);
        for (id, wk) in models.iter().enumerate() {
            let mut r = constraints::validity_score(exp.constraints, exp.spec, wk)?;
            r.client_id = id;
            reports.push(r);
            let e = eval_global(exp, wk)?;
            g += e.grad_norm_sq / k as f64;
            l += e.loss / k as f64;
            m += e.metric / k as f64;
        }
        records.push(RoundRecord {
            round: t,
            participants: (0..k).collect(),
            validity: reports.iter().map(|r| r.score).collect(),
            weights: Vec::new(),
            rho: constraints::violation_rate(&reports)?,
            grad_norm_sq: g,
            global_loss: l,
            metric: m,
            snr: None,
            degenerate: false,
            diverged,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
    }
    let d = exp.spec.param_count();
    let mut mean = vec![0.0; d];
    for wk in &models {
        mean.iter_mut().zip(wk.as_slice()).for_each(|(a, b)| *a += b / k as f64);
    }
    Ok(ExperimentOutput {
        records,
        final_params: ParamVector::new(mean)?,
        local_models: Some(models),
    })
}

/// One model on the pooled data. Each round takes `E` steps with batch
/// size `b * m` (`m` clients per round), matching the number of
/// per-sample gradients a federated round computes.
fn run_centralized(exp: &Experiment<'_>, init: ParamVector) -> Result<ExperimentOutput> {
    let cfg = exp.train;
    let pooled: Vec<Example> = exp.clients.iter().flat_map(|c| c.examples().iter().cloned()).collect();
    let pooled = ClientDataset::new(usize::MAX, pooled)?;
    let m = cfg.clients_per_round(exp.clients.len());
    let pooled_cfg = TrainConfig { batch_size: cfg.batch_size * m, ..*cfg };
    let mut w = init;
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(t);
        let mut stream = Stream::for_phase(cfg.master_seed, Phase::Minibatch, u64::MAX, t as u64);
        let mut diverged = Vec::new();
        match local_train(exp.spec, &pooled, &w, &pooled_cfg, lr, exp.variant, None, &mut stream) {
            Ok(u) => w = w.offset(&u.delta)?,
            Err(Error::Diverged { .. }) => diverged.push(usize::MAX),
            Err(e) => return Err(e),
        }
        let report = constraints::validity_score(exp.constraints, exp.spec, &w)?;
        let eval = eval_global(exp, &w)?;
        records.push(RoundRecord {
            round: t,
            participants: Vec::new(),
            validity: vec![report.score],
            weights: Vec::new(),
            rho: 1.0 - report.score,
            grad_norm_sq: eval.grad_norm_sq,
            global_loss: eval.loss,
            metric: eval.metric,
            snr: None,
            degenerate: false,
            diverged,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(ExperimentOutput { records, final_params: w, local_models: None })
}
