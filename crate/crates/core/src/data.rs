//! Synthetic data generation, label-skewed Dirichlet partitioning across
//! simulated facilities, heterogeneity measurement, and CSV import/export.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::rng::{Phase, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Regression,
}

/// Generator settings. Features are i.i.d. standard normal; the latent score
/// is `x . w + b + noise_std * eps` with `(w, b)` the ground-truth params.
/// Regression labels are the score. Classification labels threshold the
/// score at the quantile that yields `positive_rate` in expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub feature_dim: usize,
    pub task: Task,
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// `[w_0, ..., w_{p-1}, b]`.
    pub ground_truth: ParamVector,
}

fn default_positive_rate() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("data.feature_dim", "must be at least 1"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::config("data.positive_rate", "must lie in (0, 1)"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("data.noise_std", "must be finite and non-negative"));
        }
        if self.ground_truth.len() != self.feature_dim + 1 {
            return Err(Error::DimensionMismatch {
                context: "ground-truth params",
                expected: self.feature_dim + 1,
                found: self.ground_truth.len(),
            });
        }
        Ok(())
    }
}

/// Random ground truth: Gaussian weights rescaled to norm `scale`, zero bias.
pub fn random_ground_truth(feature_dim: usize, scale: f64, seed: u64) -> ParamVector {
    let mut s = Stream::for_phase(seed, Phase::GroundTruth, 0, 0);
    let mut w: Vec<f64> = (0..feature_dim).map(|_| s.normal()).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    w.iter_mut().for_each(|v| *v *= scale / norm);
    w.push(0.0);
    ParamVector::new(w).expect("finite ground truth")
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    let p = spec.feature_dim;
    let truth = spec.ground_truth.as_slice();
    let (w, bias) = truth.split_at(p);
    let threshold = match spec.task {
        Task::Regression => 0.0,
        Task::Classification => {
            let sd = (w.iter().map(|v| v * v).sum::<f64>() + spec.noise_std * spec.noise_std).sqrt();
            let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
            bias[0] + sd * std_normal.inverse_cdf(1.0 - spec.positive_rate)
        }
    };
    let mut s = Stream::for_phase(seed, Phase::Generate, 0, 0);
    let mut out = Vec::with_capacity(spec.num_samples);
    for _ in 0..spec.num_samples {
        let x: Vec<f64> = (0..p).map(|_| s.normal()).collect();
        let eps = s.normal();
        let score = model::dot(w, &x) + bias[0] + spec.noise_std * eps;
        let label = match spec.task {
            Task::Regression => score,
            Task::Classification => (score > threshold) as u8 as f64,
        };
        out.push(Example::new(x, label));
    }
    Ok(out)
}

/// Splits off a held-out fraction using a seeded shuffle. Returns
/// `(train, holdout)`, each in original order.
pub fn holdout_split(data: Vec<Example>, fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("data.holdout_fraction", "must lie in [0, 1)"));
    }
    let n = data.len();
    let n_hold = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    Stream::for_phase(seed, Phase::Holdout, 0, 0).shuffle(&mut order);
    let mut is_hold = vec![false; n];
    order[..n_hold].iter().for_each(|&i| is_hold[i] = true);
    let (mut train, mut hold) = (Vec::with_capacity(n - n_hold), Vec::with_capacity(n_hold));
    for (ex, h) in data.into_iter().zip(is_hold) {
        if h {
            hold.push(ex)
        } else {
            train.push(ex)
        }
    }
    Ok((train, hold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("partition.alpha", "must be finite and positive"));
        }
        Ok(())
    }
}

/// One facility's local data `D_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    id: usize,
    examples: Vec<Example>,
}

impl ClientDataset {
    pub fn new(id: usize, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::config("partition", format!("client {id} has no samples")));
        }
        Ok(Self { id, examples })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// `n_k`.
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Class id per example: the label itself when every label is 0 or 1,
/// otherwise a median split (label >= median is class 1).
pub fn label_classes(data: &[Example]) -> Vec<usize> {
    if data.iter().all(|e| e.label == 0.0 || e.label == 1.0) {
        return data.iter().map(|e| e.label as usize).collect();
    }
    let mut sorted: Vec<f64> = data.iter().map(|e| e.label).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    data.iter().map(|e| (e.label >= median) as usize).collect()
}

/// Assigns sample indices to clients. Per class (ascending class id) the
/// class members are shuffled, Dirichlet proportions `q` are drawn, client
/// `k` takes the next `floor(q_k * n_c)` members in client-id order and the
/// leftover members go round-robin to clients `0, 1, ...`. Any client still
/// empty afterwards takes the last-assigned sample of the currently largest
/// client (lowest id on ties). Each client's indices are returned sorted.
pub fn dirichlet_assignment(classes: &[usize], part: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    part.validate()?;
    let k = part.num_clients;
    if classes.len() < k {
        return Err(Error::config(
            "partition.num_clients",
            format!("{} samples cannot cover {k} clients", classes.len()),
        ));
    }
    let num_classes = classes.iter().copied().max().map_or(0, |m| m + 1);
    let mut s = Stream::for_phase(part.seed, Phase::Partition, 0, 0);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        s.shuffle(&mut members);
        let q = s.dirichlet(part.alpha, k);
        let n_c = members.len();
        let mut cursor = 0;
        for (client, &qk) in q.iter().enumerate() {
            let take = ((qk * n_c as f64).floor() as usize).min(n_c - cursor);
            assigned[client].extend_from_slice(&members[cursor..cursor + take]);
            cursor += take;
        }
        for (j, &idx) in members[cursor..].iter().enumerate() {
            assigned[j % k].push(idx);
        }
    }
    for client in 0..k {
        if assigned[client].is_empty() {
            let donor = (0..k)
                .max_by(|&a, &b| assigned[a].len().cmp(&assigned[b].len()).then(b.cmp(&a)))
                .expect("k >= 1");
            let moved = assigned[donor].pop().expect("donor holds at least two samples");
            assigned[client].push(moved);
        }
    }
    assigned.iter_mut().for_each(|v| v.sort_unstable());
    Ok(assigned)
}

/// Label-skewed Dirichlet partition of `data` into `K` client datasets.
pub fn dirichlet_partition(data: &[Example], part: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let classes = label_classes(data);
    let assignment = dirichlet_assignment(&classes, part)?;
    assignment
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientDataset::new(id, idx.into_iter().map(|i| data[i].clone()).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// Largest over smallest client size.
    pub size_ratio: f64,
    pub positive_rate: Vec<f64>,
    /// `sqrt((1/K) sum_k |grad F_k(w) - grad F(w)|^2)`.
    pub gradient_divergence: f64,
}

pub fn heterogeneity_report(partitions: &[ClientDataset], spec: &ModelSpec, probe: &ParamVector) -> Result<HeterogeneityReport> {
    let (global, locals) = model::global_gradient(spec, probe, partitions)?;
    let k = partitions.len() as f64;
    let divergence = (locals
        .iter()
        .map(|gk| gk.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / k)
        .sqrt();
    let sizes = partitions.iter().map(|c| c.len());
    let max = sizes.clone().max().unwrap_or(1) as f64;
    let min = sizes.min().unwrap_or(1) as f64;
    let positive_rate = partitions
        .iter()
        .map(|c| label_classes(c.examples()).iter().filter(|&&y| y == 1).count() as f64 / c.len() as f64)
        .collect();
    Ok(HeterogeneityReport {
        size_ratio: max / min,
        positive_rate,
        gradient_divergence: divergence,
    })
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Writes `feature_0..feature_{p-1},label` CSV with 17 significant digits.
pub fn write_csv<W: Write>(data: &[Example], writer: W) -> Result<()> {
    let p = data.first().map_or(0, |e| e.features.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..p).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for ex in data {
        if ex.features.len() != p {
            return Err(Error::DimensionMismatch { context: "dataset row", expected: p, found: ex.features.len() });
        }
        w.write_record(ex.features.iter().chain(std::iter::once(&ex.label)).map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Example>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let p = headers.len().saturating_sub(1);
    for i in 0..p {
        let expected = format!("feature_{i}");
        if headers.get(i) != Some(expected.as_str()) {
            return Err(Error::Schema { file: "dataset".into(), column: expected });
        }
    }
    if headers.get(p) != Some("label") {
        return Err(Error::Schema { file: "dataset".into(), column: "label".into() });
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("dataset row {row}: {e}")))?;
        let (x, y) = vals.split_at(p);
        out.push(Example::new(x.to_vec(), y[0]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, task: Task, rate: f64, noise: f64) -> SynthSpec {
        SynthSpec {
            num_samples: n,
            feature_dim: 4,
            task,
            positive_rate: rate,
            noise_std: noise,
            ground_truth: random_ground_truth(4, 2.0, 11),
        }
    }

    #[test]
    fn noiseless_regression_labels_are_exact() {
        let s = spec(200, Task::Regression, 0.5, 0.0);
        let w = s.ground_truth.as_slice();
        for ex in generate(&s, 3).unwrap() {
            let y = model::dot(&w[..4], &ex.features) + w[4];
            assert_eq!(ex.label, y);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(500, Task::Classification, 0.3, 0.5);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&generate(&s, 9).unwrap(), &mut a).unwrap();
        write_csv(&generate(&s, 9).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rare_positive_rate_is_hit() {
        let s = spec(200_000, Task::Classification, 0.0058, 0.3);
        let data = generate(&s, 1).unwrap();
        let rate = data.iter().filter(|e| e.label == 1.0).count() as f64 / data.len() as f64;
        assert!((0.0038..=0.0078).contains(&rate), "{rate}");
    }

    #[test]
    fn moderate_positive_rate_within_two_points() {
        for (seed, rate) in [(1, 0.1), (2, 0.3), (3, 0.5), (4, 0.8)] {
            let data = generate(&spec(10_000, Task::Classification, rate, 1.0), seed).unwrap();
            let got = data.iter().filter(|e| e.label == 1.0).count() as f64 / 1e4;
            assert!((got - rate).abs() <= 0.02, "{rate}: {got}");
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(spec(10, Task::Classification, 0.0, 0.0).validate().is_err());
        assert!(spec(10, Task::Classification, 0.5, -1.0).validate().is_err());
    }

    #[test]
    fn single_client_holds_everything() {
        let data = generate(&spec(300, Task::Classification, 0.3, 0.5), 2).unwrap();
        let parts = dirichlet_partition(&data, &PartitionSpec { num_clients: 1, alpha: 0.1, seed: 4 }).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].examples(), &data[..]);
    }

    #[test]
    fn too_few_samples_is_config_error() {
        let data = generate(&spec(3, Task::Classification, 0.3, 0.5), 2).unwrap();
        let err = dirichlet_partition(&data, &PartitionSpec { num_clients: 5, alpha: 1.0, seed: 4 }).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn every_client_gets_a_sample_even_with_tiny_alpha() {
        let classes: Vec<usize> = (0..50).map(|i| (i % 2 == 0) as usize).collect();
        for seed in 0..200 {
            let a = dirichlet_assignment(&classes, &PartitionSpec { num_clients: 10, alpha: 0.01, seed }).unwrap();
            assert!(a.iter().all(|c| !c.is_empty()));
        }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        // Mean client size across seeds within 25% of n/K for every client.
        let classes: Vec<usize> = (0..5000).map(|i| (i % 10 < 3) as usize).collect();
        let seeds = 50;
        let mut mean = [0.0; 5];
        for seed in 0..seeds {
            let a = dirichlet_assignment(&classes, &PartitionSpec { num_clients: 5, alpha: 10.0, seed }).unwrap();
            a.iter().enumerate().for_each(|(k, c)| mean[k] += c.len() as f64 / seeds as f64);
        }
        for m in mean {
            assert!((m - 1000.0).abs() < 250.0, "{mean:?}");
        }
    }

    #[test]
    fn small_alpha_is_severely_skewed() {
        // Monte Carlo over the sampler: median max/min ratio over 100 seeds.
        let classes: Vec<usize> = (0..5000).map(|i| (i % 10 < 3) as usize).collect();
        let ratios: Vec<f64> = (0..100)
            .map(|seed| {
                let a = dirichlet_assignment(&classes, &PartitionSpec { num_clients: 5, alpha: 0.1, seed }).unwrap();
                let max = a.iter().map(Vec::len).max().unwrap() as f64;
                let min = a.iter().map(Vec::len).min().unwrap() as f64;
                max / min
            })
            .collect();
        assert!(median(ratios) > 3.0);
    }

    #[test]
    fn identical_clients_have_zero_divergence() {
        let data = generate(&spec(100, Task::Classification, 0.4, 0.5), 5).unwrap();
        let parts: Vec<_> = (0..3).map(|k| ClientDataset::new(k, data.clone()).unwrap()).collect();
        let m = ModelSpec::logistic(4);
        let probe = ParamVector::new(vec![0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let rep = heterogeneity_report(&parts, &m, &probe).unwrap();
        assert!(rep.gradient_divergence.abs() < 1e-12);
        assert_eq!(rep.size_ratio, 1.0);
        let single = vec![ClientDataset::new(0, data).unwrap()];
        assert_eq!(heterogeneity_report(&single, &m, &probe).unwrap().gradient_divergence, 0.0);
    }

    #[test]
    fn skew_increases_divergence() {
        let m = ModelSpec::logistic(4);
        let probe = ParamVector::zeros(5);
        let data = generate(&spec(3000, Task::Classification, 0.3, 0.5), 8).unwrap();
        let d = |alpha: f64, seed: u64| {
            let parts = dirichlet_partition(&data, &PartitionSpec { num_clients: 5, alpha, seed }).unwrap();
            heterogeneity_report(&parts, &m, &probe).unwrap().gradient_divergence
        };
        let low = median((0..20).map(|s| d(0.1, s)).collect());
        let high = median((0..20).map(|s| d(10.0, s)).collect());
        assert!(low > high, "{low} vs {high}");
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let data = generate(&spec(20, Task::Regression, 0.5, 0.3), 1).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("feature_0,feature_1,feature_2,feature_3,label\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), data);
        let bad = "feature_0,target\n1,2\n";
        assert!(matches!(read_csv(bad.as_bytes()), Err(Error::Schema { .. })));
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_complete(n in 5usize..400, k in 1usize..6, alpha in 0.05f64..20.0, seed in any::<u64>()) {
            let classes: Vec<usize> = (0..n).map(|i| (i * 7 % 3 == 0) as usize).collect();
            let a = dirichlet_assignment(&classes, &PartitionSpec { num_clients: k, alpha, seed }).unwrap();
            let mut all: Vec<usize> = a.iter().flatten().copied().collect();
            prop_assert!(a.iter().all(|c| !c.is_empty()));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
