//! Experiment configuration: one JSON document holds every setting.
//!
//! Seeds left unset are derived from the run seed, so a config with a seed
//! list fully determines every run. The resolved values are echoed into the
//! run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::constraints::{Family, GeneratorSpec};
use crate::engine::{AlgorithmVariant, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{derive_key, Phase};

pub const SCHEMA_VERSION: &str = "1";

fn default_positive_rate() -> f64 {
    0.5
}
fn default_noise_std() -> f64 {
    0.5
}
fn default_scale() -> f64 {
    1.0
}
fn default_holdout() -> f64 {
    0.2
}
fn default_epsilon() -> f64 {
    10.0
}
fn default_delta() -> f64 {
    1e-5
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic sample count. Mutually exclusive with `csv_path`.
    #[serde(default)]
    pub num_samples: Option<usize>,
    /// Dataset CSV to load instead of generating.
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Norm of the ground-truth weight vector.
    #[serde(default = "default_scale")]
    pub ground_truth_scale: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Write the full dataset to `dataset_seed<N>.csv` next to the rounds.
    #[serde(default)]
    pub export: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintSource {
    #[default]
    None,
    Generated,
    File,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(default)]
    pub source: ConstraintSource,
    /// JSONL constraint file for `source = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorSpec,
    /// Fraction of constraints made to fail at the reference model.
    #[serde(default)]
    pub inject_rho: f64,
    /// Keep only these families.
    #[serde(default)]
    pub families: Option<Vec<Family>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_clip")]
    pub clip_threshold: f64,
    #[serde(default)]
    pub validate_before_noise: bool,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: default_epsilon(),
            delta: default_delta(),
            clip_threshold: default_clip(),
            validate_before_noise: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_sample_rate: f64,
    pub learning_rate: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    pub batch_size: usize,
}

impl TrainingConfig {
    pub fn with_seed(&self, master_seed: u64) -> TrainConfig {
        TrainConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            client_sample_rate: self.client_sample_rate,
            learning_rate: self.learning_rate,
            cosine_decay: self.cosine_decay,
            batch_size: self.batch_size,
            master_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub constraints: ConstraintsConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    pub training: TrainingConfig,
    pub variants: Vec<AlgorithmVariant>,
    pub seeds: Vec<u64>,
}

/// Seeds used by one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub run: u64,
    pub data: u64,
    pub partition: u64,
    pub constraints: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match (&self.data.num_samples, &self.data.csv_path) {
            (Some(0), None) => return Err(Error::config("data.num_samples", "must be at least 1")),
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::config("data", "set exactly one of `num_samples` and `csv_path`")),
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) || self.data.holdout_fraction == 0.0 {
            return Err(Error::config("data.holdout_fraction", "must lie in (0, 1)"));
        }
        if !(self.data.ground_truth_scale > 0.0) {
            return Err(Error::config("data.ground_truth_scale", "must be positive"));
        }
        if self.partition.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        if !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return Err(Error::config("partition.alpha", "must be finite and positive"));
        }
        let c = &self.constraints;
        if c.source == ConstraintSource::File && c.path.is_none() {
            return Err(Error::config("constraints.path", "required when source is `file`"));
        }
        if !(0.0..=1.0).contains(&c.inject_rho) {
            return Err(Error::config("constraints.inject_rho", "must lie in [0, 1]"));
        }
        if c.inject_rho > 0.0 && c.source == ConstraintSource::None {
            return Err(Error::config("constraints.inject_rho", "needs a constraint source"));
        }
        if self.privacy.enabled {
            crate::privacy::PrivacyBudget::new(self.privacy.epsilon, self.privacy.delta)?;
            if !(self.privacy.clip_threshold > 0.0) {
                return Err(Error::config("privacy.clip_threshold", "must be positive"));
            }
        }
        self.training.with_seed(0).validate()?;
        if self.training.rounds == 0 {
            return Err(Error::config("training.rounds", "must be at least 1"));
        }
        if !(self.training.learning_rate > 0.0) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants", "at least one variant is required"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            v.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(field.replacen("variant", &format!("variants[{i}]"), 1), message),
                other => other,
            })?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    pub fn resolve_seeds(&self, run: u64) -> ResolvedSeeds {
        ResolvedSeeds {
            run,
            data: self.data.seed.unwrap_or_else(|| derive_key(run, &[Phase::Generate as u64])),
            partition: self.partition.seed.unwrap_or_else(|| derive_key(run, &[Phase::Partition as u64])),
            constraints: self.constraints.seed.unwrap_or_else(|| derive_key(run, &[Phase::Constraints as u64])),
        }
    }

    /// Makes relative file paths absolute against `base`.
    pub fn anchor_paths(&mut self, base: &Path) {
        let anchor = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        anchor(&mut self.data.csv_path);
        anchor(&mut self.constraints.path);
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: String,
    pub created_at: String,
    pub config: ExperimentConfig,
    pub resolved_seeds: Vec<ResolvedSeeds>,
}

impl Manifest {
    pub fn new(config: ExperimentConfig) -> Self {
        let resolved_seeds = config.seeds.iter().map(|&s| config.resolve_seeds(s)).collect();
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config,
            resolved_seeds,
        }
    }
}

/// Deserializes JSON, reporting failures with the dotted path of the
/// offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        let message = inner.to_string();
        let mut field = if path == "." { String::new() } else { path };
        if let Some(name) = message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            field = if field.is_empty() { name.to_string() } else { format!("{field}.{name}") };
        }
        if inner.is_syntax() || inner.is_eof() {
            return Error::Json(inner);
        }
        Error::config(if field.is_empty() { "<root>".to_string() } else { field }, message)
    })
}

/// Reads an experiment config or a run manifest; relative paths are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let mut cfg = if value.get("schema_version").is_some() {
        parse_json::<Manifest>(&text)?.config
    } else {
        parse_json::<ExperimentConfig>(&text)?
    };
    cfg.anchor_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}
