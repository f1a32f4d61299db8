//! Python bindings for the semfed simulator.
//!
//! Structured inputs and outputs (configs, fit reports, round records) cross
//! the boundary as plain dicts and lists.
//!
//! ```text
//! >>> import semfed_py as sf
//! >>> x, y = sf.generate(1000, 5, positive_rate=0.3, seed=1)
//! >>> parts = sf.dirichlet_partition(y, num_clients=4, alpha=0.5, seed=2)
//! >>> sf.classify_zone(0.12)
//! ('danger', 'tighten constraints')
//! ```

use std::io::Cursor;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use semfed::analysis::{self, TheoryParams};
use semfed::constraints::{self, ConstraintSet as CoreConstraintSet};
use semfed::data::{self, PartitionSpec, SynthSpec, Task};
use semfed::engine::AlgorithmVariant;
use semfed::harness::{self, ExperimentConfig, RunOptions};
use semfed::model::{ModelKind, ModelSpec};
use semfed::privacy::{self, DpConfig, PrivacyBudget};
use semfed::rng::Stream;
use semfed::{Error, ParamVector};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Config { .. } | Error::Schema { .. } | Error::Input(_) | Error::DimensionMismatch { .. } | Error::Json(_)) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for semfed::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Serializes `v` to JSON and rebuilds it as Python objects.
fn to_object<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts a JSON string or any JSON-serializable Python object.
fn from_object<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    harness::parse_json(&text).py()
}

fn model_spec(kind: &str, input_dim: usize, hidden_width: usize) -> PyResult<ModelSpec> {
    let kind: ModelKind = harness::parse_json(&serde_json::to_string(kind).unwrap()).py()?;
    let spec = ModelSpec { kind, input_dim, hidden_width };
    spec.validate().py()?;
    Ok(spec)
}

fn params(v: Vec<f64>) -> PyResult<ParamVector> {
    ParamVector::new(v).py()
}

/// Synthetic features and labels from a random ground-truth model.
///
/// Returns `(features, labels)`; labels are 0/1 for classification and
/// real-valued for regression.
#[pyfunction]
#[pyo3(signature = (num_samples, feature_dim, positive_rate=0.5, noise_std=0.5, scale=1.0, regression=false, seed=0))]
fn generate(
    num_samples: usize,
    feature_dim: usize,
    positive_rate: f64,
    noise_std: f64,
    scale: f64,
    regression: bool,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let spec = SynthSpec {
        task: if regression { Task::Regression } else { Task::Classification },
        num_samples,
        feature_dim,
        positive_rate,
        noise_std,
        ground_truth: data::random_ground_truth(feature_dim, scale, seed),
    };
    let rows = data::generate(&spec, seed).py()?;
    Ok(rows.into_iter().map(|e| (e.features, e.label)).unzip())
}

/// Label-based Dirichlet split. Returns one list of row indices per client.
#[pyfunction]
#[pyo3(signature = (labels, num_clients, alpha, seed=0))]
fn dirichlet_partition(labels: Vec<f64>, num_clients: usize, alpha: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let rows: Vec<semfed::Example> = labels.into_iter().map(|y| semfed::Example::new(Vec::new(), y)).collect();
    let classes = data::label_classes(&rows);
    data::dirichlet_assignment(&classes, &PartitionSpec { num_clients, alpha, seed }).py()
}

/// Per-coordinate noise multiplier for an `(epsilon, delta)` budget.
#[pyfunction]
fn noise_scale(epsilon: f64, delta: f64) -> PyResult<f64> {
    Ok(privacy::noise_scale(PrivacyBudget::new(epsilon, delta).py()?))
}

/// Projection onto the L2 ball of radius `threshold`.
#[pyfunction]
fn clip(update: Vec<f64>, threshold: f64) -> Vec<f64> {
    privacy::clip(&update, threshold)
}

/// Clips `update` and adds Gaussian noise with std `noise_scale * clip_threshold`.
#[pyfunction]
#[pyo3(signature = (update, clip_threshold, noise_scale, seed=0))]
fn privatize(update: Vec<f64>, clip_threshold: f64, noise_scale: f64, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = DpConfig { clip_threshold, noise_scale, enabled: true };
    cfg.validate().py()?;
    Ok(privacy::privatize(&update, &cfg, &mut Stream::new(seed)))
}

#[pyfunction]
fn gradient_snr(clean: Vec<f64>, noisy: Vec<f64>) -> PyResult<f64> {
    privacy::gradient_snr(&clean, &noisy).py()
}

/// A set of constraints over model predictions.
#[pyclass(name = "ConstraintSet", module = "semfed_py")]
struct PyConstraintSet {
    inner: CoreConstraintSet,
}

#[pymethods]
impl PyConstraintSet {
    /// Parses one JSON constraint per line.
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConstraintSet::read_jsonl(Cursor::new(text.as_bytes())).py()? })
    }

    /// Constraints consistent with a reference model.
    #[staticmethod]
    #[pyo3(signature = (kind, input_dim, reference, seed=0, hidden_width=0))]
    fn generate(kind: &str, input_dim: usize, reference: Vec<f64>, seed: u64, hidden_width: usize) -> PyResult<Self> {
        let spec = model_spec(kind, input_dim, hidden_width)?;
        let gen = constraints::GeneratorSpec::default();
        Ok(Self { inner: constraints::generate_consistent(&spec, &params(reference)?, &gen, seed).py()? })
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_jsonl(&mut buf).py()?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Copy whose violation rate at `reference` is within 0.02 of `target_rho`.
    #[pyo3(signature = (target_rho, kind, input_dim, reference, seed=0, hidden_width=0))]
    fn inject(&self, target_rho: f64, kind: &str, input_dim: usize, reference: Vec<f64>, seed: u64, hidden_width: usize) -> PyResult<Self> {
        let spec = model_spec(kind, input_dim, hidden_width)?;
        let inner = constraints::inject_violations(&self.inner, target_rho, &spec, &params(reference)?, seed).py()?;
        Ok(Self { inner })
    }

    /// `(score, bits)` of a model.
    #[pyo3(signature = (kind, input_dim, model, hidden_width=0))]
    fn validity(&self, kind: &str, input_dim: usize, model: Vec<f64>, hidden_width: usize) -> PyResult<(f64, Vec<bool>)> {
        let spec = model_spec(kind, input_dim, hidden_width)?;
        let report = constraints::validity_score(&self.inner, &spec, &params(model)?).py()?;
        Ok((report.score, report.bits))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ConstraintSet(len={})", self.inner.len())
    }
}

/// Runs one seed of a config for one variant and returns
/// `{"records": [...], "final_params": [...]}`.
#[pyfunction]
#[pyo3(signature = (config, seed, variant="scfa"))]
fn run_experiment<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, seed: u64, variant: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = from_object(config)?;
    cfg.validate().py()?;
    let v = match cfg.variants.iter().find(|v| v.name() == variant) {
        Some(v) => *v,
        None => harness::parse_json::<AlgorithmVariant>(&serde_json::json!({ "kind": variant }).to_string()).py()?,
    };
    let out = py.detach(|| harness::prepare(&cfg, seed).and_then(|p| p.run(&v))).py()?;
    to_object(
        py,
        &serde_json::json!({ "records": out.records, "final_params": out.final_params.as_slice() }),
    )
}

/// Runs a whole config, writing manifest, rounds CSV and models to `out`.
/// Returns the per-run summaries.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = from_object(config)?;
    let art = py.detach(|| harness::run_config(&cfg, &out)).py()?;
    to_object(py, &art.results)
}

/// Runs a sweep file; returns the summary rows.
#[pyfunction]
fn run_sweep<'py>(py: Python<'py>, sweep_path: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let art = py.detach(|| harness::cmd_sweep(&sweep_path, &out, &RunOptions::default())).py()?;
    to_object(py, &art.rows)
}

/// Fits `y_t = a / sqrt(t) + b * mean(rho)`.
#[pyfunction]
#[pyo3(signature = (series, rho, seed=0))]
fn fit_convergence_rate<'py>(py: Python<'py>, series: Vec<f64>, rho: Vec<f64>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_object(py, &analysis::fit_convergence_rate(&series, &rho, seed).py()?)
}

/// Linear fit of a metric on the violation rate.
#[pyfunction]
#[pyo3(signature = (rho, metric, threshold=None, f_star=None))]
fn violation_fit<'py>(
    py: Python<'py>,
    rho: Vec<f64>,
    metric: Vec<f64>,
    threshold: Option<f64>,
    f_star: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    if rho.len() != metric.len() {
        return Err(PyValueError::new_err("rho and metric differ in length"));
    }
    let points: Vec<(f64, f64)> = rho.into_iter().zip(metric).collect();
    to_object(py, &analysis::violation_fit(&points, threshold, f_star).py()?)
}

/// Term-by-term convergence bound for a dict of constants.
#[pyfunction]
fn convergence_bound<'py>(py: Python<'py>, constants: &Bound<'py, PyAny>, rho: f64) -> PyResult<Bound<'py, PyAny>> {
    let p: TheoryParams = from_object(constants)?;
    p.validate().py()?;
    to_object(py, &analysis::bound_terms(&p, rho))
}

/// `(zone, recommended action)` for a violation rate.
#[pyfunction]
fn classify_zone(rho: f64) -> PyResult<(&'static str, &'static str)> {
    let z = analysis::classify_zone(rho).py()?.zone;
    Ok((z.name(), z.action()))
}

#[pyfunction]
fn utility_loss(private_metric: f64, nonprivate_metric: f64) -> PyResult<f64> {
    analysis::utility_loss(private_metric, nonprivate_metric).py()
}

#[pymodule]
fn semfed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConstraintSet>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(noise_scale, m)?)?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(privatize, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_snr, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(fit_convergence_rate, m)?)?;
    m.add_function(wrap_pyfunction!(violation_fit, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_bound, m)?)?;
    m.add_function(wrap_pyfunction!(classify_zone, m)?)?;
    m.add_function(wrap_pyfunction!(utility_loss, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
