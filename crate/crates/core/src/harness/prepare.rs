use std::fs::File;
use std::io::BufReader;

use crate::analysis;
use crate::constraints::{self, ConstraintSet};
use crate::data::{self, ClientDataset, PartitionSpec, SynthSpec, Task};
use crate::engine::{self, AlgorithmVariant, Experiment, ExperimentOutput, PrivacySettings, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::privacy::{DpConfig, PrivacyBudget};
use crate::rng::{derive_key, Phase};

use super::config::{ConstraintSource, ExperimentConfig, ResolvedSeeds};

/// Full-batch gradient steps used to fit the reference model.
pub const REFERENCE_STEPS: usize = 1000;

/// Data, constraints and settings for one run seed, shared by every
/// variant.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub spec: ModelSpec,
    pub seeds: ResolvedSeeds,
    pub dataset: Vec<Example>,
    pub clients: Vec<ClientDataset>,
    pub holdout: Vec<Example>,
    /// Model the constraint set is built and calibrated against.
    pub reference: ParamVector,
    pub constraints: ConstraintSet,
    pub privacy: PrivacySettings,
    pub train: TrainConfig,
}

impl PreparedRun {
    pub fn experiment<'a>(&'a self, variant: &'a AlgorithmVariant) -> Experiment<'a> {
        Experiment {
            spec: &self.spec,
            clients: &self.clients,
            holdout: &self.holdout,
            constraints: &self.constraints,
            privacy: &self.privacy,
            train: &self.train,
            variant,
            initial: None,
        }
    }

    pub fn run(&self, variant: &AlgorithmVariant) -> Result<ExperimentOutput> {
        engine::run_experiment(&self.experiment(variant))
    }

    /// Same run with privacy switched off.
    pub fn without_privacy(&self) -> PreparedRun {
        PreparedRun { privacy: PrivacySettings::default(), ..self.clone() }
    }
}

/// Minimizer of the pooled loss by full-batch gradient descent with step
/// `1 / L`, `L` the top Hessian eigenvalue at the start point.
pub fn fit_reference(spec: &ModelSpec, data: &[Example], seed: u64) -> Result<ParamVector> {
    let mut w = model::initial_params(spec, seed);
    let l = analysis::smoothness(spec, data, &w, seed)?;
    let scale = if spec.kind == model::ModelKind::Mlp { 0.5 } else { 1.0 };
    let step = scale / l.max(1e-12);
    for _ in 0..REFERENCE_STEPS {
        let g = model::gradient(spec, &w, data)?;
        let next: Vec<f64> = g.values.iter().map(|gi| -step * gi).collect();
        w = w.offset(&next)?;
    }
    Ok(w)
}

pub fn prepare(cfg: &ExperimentConfig, run_seed: u64) -> Result<PreparedRun> {
    let seeds = cfg.resolve_seeds(run_seed);
    let spec = cfg.model;
    let dataset = match (&cfg.data.num_samples, &cfg.data.csv_path) {
        (Some(n), _) => {
            let task = if spec.is_classifier() { Task::Classification } else { Task::Regression };
            let synth = SynthSpec {
                num_samples: *n,
                feature_dim: spec.input_dim,
                task,
                positive_rate: cfg.data.positive_rate,
                noise_std: cfg.data.noise_std,
                ground_truth: data::random_ground_truth(spec.input_dim, cfg.data.ground_truth_scale, seeds.data),
            };
            data::generate(&synth, seeds.data)?
        }
        (None, Some(path)) => {
            let rows = data::read_csv(BufReader::new(File::open(path)?))?;
            if let Some(e) = rows.first() {
                if e.features.len() != spec.input_dim {
                    return Err(Error::DimensionMismatch { context: "dataset features", expected: spec.input_dim, found: e.features.len() });
                }
            }
            rows
        }
        (None, None) => return Err(Error::config("data", "set `num_samples` or `csv_path`")),
    };
    let (train, holdout) = data::holdout_split(dataset.clone(), cfg.data.holdout_fraction, seeds.data)?;
    if holdout.is_empty() {
        return Err(Error::config("data.holdout_fraction", "held-out split is empty"));
    }
    let clients = data::dirichlet_partition(
        &train,
        &PartitionSpec { num_clients: cfg.partition.num_clients, alpha: cfg.partition.alpha, seed: seeds.partition },
    )?;

    let reference = fit_reference(&spec, &train, seeds.constraints)?;
    let c = &cfg.constraints;
    let mut set = match c.source {
        ConstraintSource::None => ConstraintSet::empty(),
        ConstraintSource::Generated => constraints::generate_consistent(&spec, &reference, &c.generator, seeds.constraints)?,
        ConstraintSource::File => {
            let path = c.path.as_ref().ok_or_else(|| Error::config("constraints.path", "missing"))?;
            ConstraintSet::read_jsonl(BufReader::new(File::open(path)?))?
        }
    };
    if let Some(fams) = &c.families {
        set = set.only(fams);
    }
    if c.inject_rho > 0.0 {
        let key = derive_key(seeds.constraints, &[Phase::Injection as u64]);
        set = constraints::inject_violations(&set, c.inject_rho, &spec, &reference, key)?;
    }

    let privacy = if cfg.privacy.enabled {
        let budget = PrivacyBudget::new(cfg.privacy.epsilon, cfg.privacy.delta)?;
        PrivacySettings {
            dp: Some(DpConfig::from_budget(budget, cfg.privacy.clip_threshold)?),
            validate_before_noise: cfg.privacy.validate_before_noise,
        }
    } else {
        PrivacySettings::default()
    };

    Ok(PreparedRun {
        spec,
        seeds,
        dataset,
        clients,
        holdout,
        reference,
        constraints: set,
        privacy,
        train: cfg.training.with_seed(run_seed),
    })
}
