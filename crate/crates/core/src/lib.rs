//! Deterministic federated-learning simulator with constraint-weighted
//! aggregation, differential privacy and theory-fitting tools.

pub mod analysis;
pub mod constraints;
pub mod data;
pub mod engine;
pub mod harness;
mod error;
pub mod model;
pub mod privacy;
pub mod rng;

pub use constraints::{Constraint, ConstraintSet, Family, Rule, ValidityReport};
pub use data::{ClientDataset, PartitionSpec, SynthSpec, Task};
pub use engine::{AlgorithmVariant, Experiment, ExperimentOutput, PrivacySettings, RoundRecord, TrainConfig};
pub use error::{Error, Result};
pub use model::{Example, ModelKind, ModelSpec, ParamVector};
pub use privacy::{DpConfig, PrivacyBudget};
