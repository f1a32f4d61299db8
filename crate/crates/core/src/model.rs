//! Trainable models, per-sample losses and gradients, and the sample-weighted
//! global objective.
//!
//! Parameter layouts:
//! * linear / logistic: `[w_0, ..., w_{p-1}, bias]`, so `d = p + 1`.
//! * one-hidden-layer MLP with `h` tanh units and a sigmoid output:
//!   `[W1 (h x p, row-major), b1 (h), w2 (h), b2]`, so `d = h*p + 2h + 1`.
//!
//! Losses are means over the batch. Logistic and MLP use binary
//! cross-entropy on the logit; linear uses half the squared error.

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    #[serde(rename = "mlp-1-hidden")]
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Hidden width, used by the MLP only.
    #[serde(default)]
    pub hidden_width: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self { kind: ModelKind::LinearRegression, input_dim, hidden_width: 0 }
    }

    pub fn logistic(input_dim: usize) -> Self {
        Self { kind: ModelKind::LogisticRegression, input_dim, hidden_width: 0 }
    }

    pub fn mlp(input_dim: usize, hidden_width: usize) -> Self {
        Self { kind: ModelKind::Mlp, input_dim, hidden_width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_width == 0 {
            return Err(Error::config("model.hidden_width", "MLP needs a hidden width of at least 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let p = self.input_dim;
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => p + 1,
            ModelKind::Mlp => self.hidden_width * p + 2 * self.hidden_width + 1,
        }
    }

    /// Whether the model outputs a probability (and is scored by F1).
    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::LinearRegression
    }
}

/// Model parameter point. Entries are finite and the length is fixed for
/// the lifetime of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self + delta`, rejecting non-finite results.
    pub fn offset(&self, delta: &[f64]) -> Result<Self> {
        debug_assert_eq!(delta.len(), self.0.len());
        Self::new(self.0.iter().zip(delta).map(|(w, d)| w + d).collect())
    }

}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Example {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub batch_size: usize,
}

impl GradientEstimate {
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_params(spec: &ModelSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected: spec.param_count(),
            found: params.len(),
        });
    }
    Ok(())
}

fn check_features(spec: &ModelSpec, features: &[f64]) -> Result<()> {
    if features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "feature vector",
            expected: spec.input_dim,
            found: features.len(),
        });
    }
    Ok(())
}

/// Pre-activation output: the logit for classifiers, the prediction for
/// linear regression. Fills `hidden` with tanh activations for the MLP.
fn forward(spec: &ModelSpec, params: &[f64], x: &[f64], hidden: &mut Vec<f64>) -> f64 {
    let p = spec.input_dim;
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => dot(&params[..p], x) + params[p],
        ModelKind::Mlp => {
            let h = spec.hidden_width;
            let (w1, rest) = params.split_at(h * p);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            hidden.clear();
            hidden.extend((0..h).map(|j| (dot(&w1[j * p..(j + 1) * p], x) + b1[j]).tanh()));
            dot(w2, hidden) + b2[0]
        }
    }
}

/// Model output for one input: probability for classifiers, value for
/// linear regression.
pub fn predict(spec: &ModelSpec, params: &ParamVector, features: &[f64]) -> Result<f64> {
    check_params(spec, params.as_slice())?;
    check_features(spec, features)?;
    Ok(predict_unchecked(spec, params.as_slice(), features))
}

pub(crate) fn predict_unchecked(spec: &ModelSpec, params: &[f64], features: &[f64]) -> f64 {
    let mut hidden = Vec::new();
    let z = forward(spec, params, features, &mut hidden);
    if spec.is_classifier() {
        sigmoid(z)
    } else {
        z
    }
}

/// Sums per-sample losses and, when `grad` is given, adds per-sample
/// gradients into it. Returns `(loss_sum, count)`.
pub(crate) fn accumulate<'a, I>(spec: &ModelSpec, params: &[f64], batch: I, mut grad: Option<&mut [f64]>) -> Result<(f64, usize)>
where
    I: IntoIterator<Item = &'a Example>,
{
    check_params(spec, params)?;
    let p = spec.input_dim;
    let h = spec.hidden_width;
    let mut hidden = Vec::with_capacity(h);
    let mut loss = 0.0;
    let mut count = 0usize;
    for ex in batch {
        check_features(spec, &ex.features)?;
        let z = forward(spec, params, &ex.features, &mut hidden);
        // dloss/dz
        let dz = match spec.kind {
            ModelKind::LinearRegression => {
                let r = z - ex.label;
                loss += 0.5 * r * r;
                r
            }
            ModelKind::LogisticRegression | ModelKind::Mlp => {
                loss += softplus(z) - ex.label * z;
                sigmoid(z) - ex.label
            }
        };
        count += 1;
        let Some(g) = grad.as_deref_mut() else { continue };
        match spec.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                for (gi, xi) in g[..p].iter_mut().zip(&ex.features) {
                    *gi += dz * xi;
                }
                g[p] += dz;
            }
            ModelKind::Mlp => {
                let w2 = &params[h * p + h..h * p + 2 * h];
                for j in 0..h {
                    let a = hidden[j];
                    g[h * p + h + j] += dz * a;
                    let dpre = dz * w2[j] * (1.0 - a * a);
                    for (gi, xi) in g[j * p..(j + 1) * p].iter_mut().zip(&ex.features) {
                        *gi += dpre * xi;
                    }
                    g[h * p + j] += dpre;
                }
                g[h * p + 2 * h] += dz;
            }
        }
    }
    Ok((loss, count))
}

fn empty_batch() -> Error {
    Error::config("batch", "batch must be non-empty")
}

/// Mean per-sample loss over `batch`.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(empty_batch());
    }
    let (sum, n) = accumulate(spec, params.as_slice(), batch, None)?;
    Ok(sum / n as f64)
}

/// Gradient of [`loss`] at `params`.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &[Example]) -> Result<GradientEstimate> {
    gradient_of(spec, params.as_slice(), batch.iter())
}

pub(crate) fn gradient_of<'a, I>(spec: &ModelSpec, params: &[f64], batch: I) -> Result<GradientEstimate>
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut g = vec![0.0; spec.param_count()];
    let (_, n) = accumulate(spec, params, batch, Some(&mut g))?;
    if n == 0 {
        return Err(empty_batch());
    }
    let inv = 1.0 / n as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(GradientEstimate { values: g, batch_size: n })
}

/// `F(w) = sum_k (n_k / n) F_k(w)`.
pub fn global_objective(spec: &ModelSpec, params: &ParamVector, partitions: &[ClientDataset]) -> Result<f64> {
    if partitions.is_empty() {
        return Err(Error::config("partitions", "at least one client dataset is required"));
    }
    let n: usize = partitions.iter().map(|c| c.len()).sum();
    let mut total = 0.0;
    for client in partitions {
        let fk = loss(spec, params, client.examples())?;
        total += client.len() as f64 / n as f64 * fk;
    }
    Ok(total)
}

/// `grad F(w) = sum_k (n_k / n) grad F_k(w)`, together with the per-client
/// gradients.
pub fn global_gradient(spec: &ModelSpec, params: &ParamVector, partitions: &[ClientDataset]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if partitions.is_empty() {
        return Err(Error::config("partitions", "at least one client dataset is required"));
    }
    let n: usize = partitions.iter().map(|c| c.len()).sum();
    let mut global = vec![0.0; spec.param_count()];
    let mut locals = Vec::with_capacity(partitions.len());
    for client in partitions {
        let gk = gradient(spec, params, client.examples())?.values;
        let wk = client.len() as f64 / n as f64;
        for (g, v) in global.iter_mut().zip(&gk) {
            *g += wk * v;
        }
        locals.push(gk);
    }
    Ok((global, locals))
}

/// Deterministic starting point: zeros for the convex models, small
/// Gaussian weights for the MLP (zero init leaves hidden units symmetric).
pub fn initial_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => ParamVector::zeros(spec.param_count()),
        ModelKind::Mlp => {
            let mut s = crate::rng::Stream::for_phase(seed, crate::rng::Phase::Init, 0, 0);
            let scale = 1.0 / (spec.input_dim as f64).sqrt();
            ParamVector((0..spec.param_count()).map(|_| scale * s.normal()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn random_batch(s: &mut Stream, p: usize, n: usize, binary: bool) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|_| s.normal()).collect();
                let y = if binary { (s.uniform() < 0.4) as u8 as f64 } else { s.normal() };
                Example::new(x, y)
            })
            .collect()
    }

    fn finite_difference(spec: &ModelSpec, w: &[f64], batch: &[Example], h: f64) -> Vec<f64> {
        (0..w.len())
            .map(|i| {
                let mut plus = w.to_vec();
                let mut minus = w.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let lp = loss(spec, &pv(&plus), batch).unwrap();
                let lm = loss(spec, &pv(&minus), batch).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn logistic_zero_params_gives_ln2() {
        let spec = ModelSpec::logistic(3);
        let mut s = Stream::new(1);
        let batch = random_batch(&mut s, 3, 17, true);
        let l = loss(&spec, &ParamVector::zeros(4), &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn linear_interpolating_params_have_zero_loss_and_gradient() {
        let spec = ModelSpec::linear(2);
        let w = pv(&[1.5, -2.0, 0.25]);
        let batch: Vec<Example> = [[1.0, 2.0], [-0.5, 0.0], [3.0, 1.0]]
            .iter()
            .map(|x| Example::new(x.to_vec(), 1.5 * x[0] - 2.0 * x[1] + 0.25))
            .collect();
        assert_eq!(loss(&spec, &w, &batch).unwrap(), 0.0);
        assert!(gradient(&spec, &w, &batch).unwrap().values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn logistic_loss_matches_hand_summation() {
        let spec = ModelSpec::logistic(2);
        let w = [0.3, -0.7, 0.1];
        let batch = vec![
            Example::new(vec![1.0, 0.0], 1.0),
            Example::new(vec![0.0, 1.0], 0.0),
            Example::new(vec![-1.0, 2.0], 1.0),
            Example::new(vec![0.5, 0.5], 0.0),
        ];
        // Brute force: -[y ln p + (1-y) ln(1-p)] per example.
        let mut expected = 0.0;
        for ex in &batch {
            let z = w[0] * ex.features[0] + w[1] * ex.features[1] + w[2];
            let p = 1.0 / (1.0 + (-z).exp());
            expected += -(ex.label * p.ln() + (1.0 - ex.label) * (1.0 - p).ln());
        }
        expected /= 4.0;
        let got = loss(&spec, &pv(&w), &batch).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn logistic_single_example_gradient_at_zero() {
        let spec = ModelSpec::logistic(3);
        let x = vec![2.0, -1.0, 0.5];
        let g = gradient(&spec, &ParamVector::zeros(4), &[Example::new(x.clone(), 1.0)]).unwrap();
        // (p - y) * [x, 1] with p = 0.5
        assert_eq!(g.values, vec![-1.0, 0.5, -0.25, -0.5]);
    }

    #[test]
    fn gradient_agrees_with_finite_differences_all_kinds() {
        let mut s = Stream::new(77);
        for spec in [ModelSpec::linear(4), ModelSpec::logistic(4), ModelSpec::mlp(4, 3)] {
            let batch = random_batch(&mut s, 4, 25, spec.is_classifier());
            let w: Vec<f64> = (0..spec.param_count()).map(|_| 0.5 * s.normal()).collect();
            let g = gradient(&spec, &pv(&w), &batch).unwrap().values;
            let fd = finite_difference(&spec, &w, &batch, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-4, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = ModelSpec::logistic(3);
        let batch = vec![Example::new(vec![1.0, 2.0], 0.0)];
        assert!(matches!(loss(&spec, &ParamVector::zeros(4), &batch), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(loss(&spec, &ParamVector::zeros(3), &batch), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn non_finite_params_rejected() {
        assert!(ParamVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn global_objective_weighted_sum() {
        // Linear model w = 0, labels chosen so F_k = 1, 2, 3 exactly (0.5 y^2).
        let spec = ModelSpec::linear(1);
        let client = |id: usize, n: usize, f: f64| {
            let y = (2.0 * f).sqrt();
            ClientDataset::new(id, vec![Example::new(vec![0.0], y); n]).unwrap()
        };
        let parts = vec![client(0, 10, 1.0), client(1, 20, 2.0), client(2, 70, 3.0)];
        let f = global_objective(&spec, &ParamVector::zeros(2), &parts).unwrap();
        assert!((f - 2.6).abs() < 1e-12, "{f}");
    }

    #[test]
    fn global_objective_degenerate_cases() {
        let spec = ModelSpec::logistic(2);
        let mut s = Stream::new(4);
        let data = random_batch(&mut s, 2, 30, true);
        let w = pv(&[0.2, -0.4, 0.1]);
        let single = vec![ClientDataset::new(0, data.clone()).unwrap()];
        let f1 = global_objective(&spec, &w, &single).unwrap();
        assert!((f1 - loss(&spec, &w, &data).unwrap()).abs() < 1e-15);
        let twins = vec![ClientDataset::new(0, data.clone()).unwrap(), ClientDataset::new(1, data.clone()).unwrap()];
        assert!((global_objective(&spec, &w, &twins).unwrap() - f1).abs() < 1e-15);
        assert!(global_objective(&spec, &w, &[]).is_err());
    }

    proptest! {
        #[test]
        fn gradient_relative_error_small(seed in 0u64..10_000, kind in 0usize..3) {
            let spec = [ModelSpec::linear(3), ModelSpec::logistic(3), ModelSpec::mlp(3, 2)][kind];
            let mut s = Stream::new(seed);
            let batch = random_batch(&mut s, 3, 8, spec.is_classifier());
            let w: Vec<f64> = (0..spec.param_count()).map(|_| s.normal()).collect();
            let g = gradient(&spec, &pv(&w), &batch).unwrap().values;
            let fd = finite_difference(&spec, &w, &batch, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-2), "{} vs {}", a, b);
            }
        }

        #[test]
        fn uniform_sizes_give_unweighted_mean(seed in 0u64..10_000) {
            let spec = ModelSpec::logistic(2);
            let mut s = Stream::new(seed);
            let parts: Vec<ClientDataset> = (0..4)
                .map(|k| ClientDataset::new(k, random_batch(&mut s, 2, 6, true)).unwrap())
                .collect();
            let w = pv(&[s.normal(), s.normal(), s.normal()]);
            let f = global_objective(&spec, &w, &parts).unwrap();
            let mean = parts.iter().map(|c| loss(&spec, &w, c.examples()).unwrap()).sum::<f64>() / 4.0;
            prop_assert!((f - mean).abs() < 1e-12);
        }

        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..10_000) {
            let spec = ModelSpec::logistic(3);
            let mut s = Stream::new(seed);
            let mut batch = random_batch(&mut s, 3, 12, true);
            let w = pv(&[s.normal(), s.normal(), s.normal(), s.normal()]);
            let before = loss(&spec, &w, &batch).unwrap();
            s.shuffle(&mut batch);
            let after = loss(&spec, &w, &batch).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
