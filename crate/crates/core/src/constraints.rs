//! Prediction-level validity predicates, per-client validity scores, the
//! round violation rate, controlled violation injection, and Monte Carlo
//! estimation of the fraction of parameter space the constraints admit.
//!
//! Every constraint is evaluated on the model's outputs over a fixed list of
//! probe inputs. The four families:
//!
//! | family                 | passes when                                              |
//! |------------------------|----------------------------------------------------------|
//! | `temporal-monotonicity`| `pred[i+1] >= pred[i] - tol` along the probe order       |
//! | `causal-precedence`    | `pred[antecedent] > pred[consequent] - tol`              |
//! | `capacity-bound`       | `lower - tol <= pred[i] <= upper + tol` for every probe  |
//! | `physical-feasibility` | `abs(sum_i c_i * pred[i] - target) <= tol`               |

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::{Phase, Stream};

/// Default tolerance for equality-type rules.
pub const EQUALITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TemporalMonotonicity,
    CausalPrecedence,
    CapacityBound,
    PhysicalFeasibility,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::TemporalMonotonicity,
        Family::CausalPrecedence,
        Family::CapacityBound,
        Family::PhysicalFeasibility,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::TemporalMonotonicity => "temporal-monotonicity",
            Family::CausalPrecedence => "causal-precedence",
            Family::CapacityBound => "capacity-bound",
            Family::PhysicalFeasibility => "physical-feasibility",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Rule {
    /// Probes are listed in temporal order.
    TemporalMonotonicity,
    CausalPrecedence { antecedent: usize, consequent: usize },
    CapacityBound { lower: f64, upper: f64 },
    PhysicalFeasibility { coefficients: Vec<f64>, target: f64 },
}

impl Rule {
    pub fn family(&self) -> Family {
        match self {
            Rule::TemporalMonotonicity => Family::TemporalMonotonicity,
            Rule::CausalPrecedence { .. } => Family::CausalPrecedence,
            Rule::CapacityBound { .. } => Family::CapacityBound,
            Rule::PhysicalFeasibility { .. } => Family::PhysicalFeasibility,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: usize,
    #[serde(flatten)]
    pub rule: Rule,
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub tolerance: f64,
}

impl Constraint {
    pub fn family(&self) -> Family {
        self.rule.family()
    }

    pub fn validate(&self) -> Result<()> {
        let field = format!("constraints[{}]", self.id);
        if self.probes.is_empty() {
            return Err(Error::config(field, "probe list must be non-empty"));
        }
        let p = self.probes[0].len();
        if self.probes.iter().any(|r| r.len() != p) {
            return Err(Error::config(field, "probe rows differ in length"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config(field, "tolerance must be non-negative"));
        }
        match &self.rule {
            Rule::TemporalMonotonicity => {}
            Rule::CausalPrecedence { antecedent, consequent } => {
                let n = self.probes.len();
                if *antecedent >= n || *consequent >= n {
                    return Err(Error::config(field, "precedence index outside probe list"));
                }
            }
            Rule::CapacityBound { lower, upper } => {
                if !(lower <= upper) {
                    return Err(Error::config(field, "capacity bound needs lower <= upper"));
                }
            }
            Rule::PhysicalFeasibility { coefficients, .. } => {
                if coefficients.len() != self.probes.len() {
                    return Err(Error::config(field, "one coefficient per probe is required"));
                }
            }
        }
        Ok(())
    }

    fn predictions(&self, spec: &ModelSpec, params: &ParamVector) -> Result<Vec<f64>> {
        self.probes.iter().map(|x| model::predict(spec, params, x)).collect()
    }

    fn holds(&self, preds: &[f64]) -> bool {
        let tol = self.tolerance;
        match &self.rule {
            Rule::TemporalMonotonicity => preds.windows(2).all(|w| w[1] >= w[0] - tol),
            Rule::CausalPrecedence { antecedent, consequent } => preds[*antecedent] > preds[*consequent] - tol,
            Rule::CapacityBound { lower, upper } => preds.iter().all(|&v| v >= lower - tol && v <= upper + tol),
            Rule::PhysicalFeasibility { coefficients, target } => {
                let total: f64 = coefficients.iter().zip(preds).map(|(c, v)| c * v).sum();
                (total - target).abs() <= tol
            }
        }
    }
}

/// `c_j(w)`.
pub fn evaluate_constraint(c: &Constraint, spec: &ModelSpec, params: &ParamVector) -> Result<bool> {
    Ok(c.holds(&c.predictions(spec, params)?))
}

/// The set `C = {c_1, ..., c_M}`. An empty set is allowed and behaves as
/// "nothing to violate".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self> {
        let mut ids: Vec<usize> = constraints.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("constraints", "constraint ids must be unique"));
        }
        for c in &constraints {
            c.validate()?;
        }
        Ok(Self { constraints })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Subset holding only the given families, ids preserved.
    pub fn only(&self, families: &[Family]) -> Self {
        Self {
            constraints: self.constraints.iter().filter(|c| families.contains(&c.family())).cloned().collect(),
        }
    }

    /// Writes one JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.constraints {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the format written by [`ConstraintSet::write_jsonl`]; blank
    /// lines and lines starting with `#` are skipped.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut out = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let c: Constraint = serde_json::from_str(t)
                .map_err(|e| Error::config(format!("constraints line {}", lineno + 1), e.to_string()))?;
            out.push(c);
        }
        Self::new(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub client_id: usize,
    pub bits: Vec<bool>,
    /// `s_k = (1/M) sum_j v_{k,j}`, 1 for an empty set.
    pub score: f64,
}

/// Evaluates every constraint at `params`, in constraint order.
pub fn validity_score(set: &ConstraintSet, spec: &ModelSpec, params: &ParamVector) -> Result<ValidityReport> {
    let bits = set
        .constraints
        .iter()
        .map(|c| evaluate_constraint(c, spec, params))
        .collect::<Result<Vec<bool>>>()?;
    let score = if bits.is_empty() {
        1.0
    } else {
        bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64
    };
    Ok(ValidityReport { client_id: 0, bits, score })
}

/// `rho = 1 - min_k s_k`.
pub fn violation_rate(reports: &[ValidityReport]) -> Result<f64> {
    reports
        .iter()
        .map(|r| r.score)
        .min_by(f64::total_cmp)
        .map(|m| 1.0 - m)
        .ok_or_else(|| Error::config("reports", "violation rate needs at least one report"))
}

/// Knobs for building a constraint set consistent with a reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    /// Number of constraints per family, in [`Family::ALL`] order.
    pub per_family: [usize; 4],
    /// Standard deviation of probe coordinates.
    pub probe_spread: f64,
    /// Probes per temporal-monotonicity chain.
    pub chain_length: usize,
    /// Step between consecutive chain probes.
    pub chain_step: f64,
    /// Minimum reference-prediction gap for a precedence pair.
    pub precedence_gap: f64,
    /// Half-width of the capacity interval around the reference prediction.
    pub capacity_margin: f64,
    /// Tolerance of the conservation rule.
    pub feasibility_tolerance: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            per_family: [25, 25, 25, 25],
            probe_spread: 1.0,
            chain_length: 4,
            chain_step: 0.5,
            precedence_gap: 0.05,
            capacity_margin: 0.2,
            feasibility_tolerance: 0.1,
        }
    }
}

fn random_point(s: &mut Stream, p: usize, spread: f64) -> Vec<f64> {
    (0..p).map(|_| spread * s.normal()).collect()
}

/// Builds constraints that the `reference` model satisfies (typically the
/// data generator's ground truth), so they encode true structure.
pub fn generate_consistent(spec: &ModelSpec, reference: &ParamVector, gen: &GeneratorSpec, seed: u64) -> Result<ConstraintSet> {
    spec.validate()?;
    if reference.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "reference params",
            expected: spec.param_count(),
            found: reference.len(),
        });
    }
    let p = spec.input_dim;
    let pred = |x: &[f64]| model::predict_unchecked(spec, reference.as_slice(), x);
    let mut s = Stream::for_phase(seed, Phase::Constraints, 0, 0);
    let mut out = Vec::new();
    const MAX_TRIES: usize = 1000;
    for (family, &count) in Family::ALL.iter().zip(&gen.per_family) {
        for _ in 0..count {
            let id = out.len();
            let mut built = None;
            for _ in 0..MAX_TRIES {
                let candidate = match family {
                    Family::TemporalMonotonicity => {
                        let base = random_point(&mut s, p, gen.probe_spread);
                        let dir = random_point(&mut s, p, 1.0);
                        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let mut probes: Vec<Vec<f64>> = (0..gen.chain_length.max(2))
                            .map(|i| base.iter().zip(&dir).map(|(b, d)| b + i as f64 * gen.chain_step * d / norm).collect())
                            .collect();
                        let preds: Vec<f64> = probes.iter().map(|x| pred(x)).collect();
                        if preds.windows(2).all(|w| w[1] > w[0]) {
                        } else if preds.windows(2).all(|w| w[1] < w[0]) {
                            probes.reverse();
                        } else {
                            continue;
                        }
                        Constraint { id, rule: Rule::TemporalMonotonicity, probes, tolerance: 0.0 }
                    }
                    Family::CausalPrecedence => {
                        let a = random_point(&mut s, p, gen.probe_spread);
                        let c = random_point(&mut s, p, gen.probe_spread);
                        let (pa, pc) = (pred(&a), pred(&c));
                        if (pa - pc).abs() < gen.precedence_gap {
                            continue;
                        }
                        let (antecedent, consequent) = if pa > pc { (0, 1) } else { (1, 0) };
                        Constraint {
                            id,
                            rule: Rule::CausalPrecedence { antecedent, consequent },
                            probes: vec![a, c],
                            tolerance: EQUALITY_TOLERANCE,
                        }
                    }
                    Family::CapacityBound => {
                        let x = random_point(&mut s, p, gen.probe_spread);
                        let v = pred(&x);
                        let (mut lower, mut upper) = (v - gen.capacity_margin, v + gen.capacity_margin);
                        if spec.is_classifier() {
                            lower = lower.max(0.0);
                            upper = upper.min(1.0);
                        }
                        Constraint { id, rule: Rule::CapacityBound { lower, upper }, probes: vec![x], tolerance: 0.0 }
                    }
                    Family::PhysicalFeasibility => {
                        let a = random_point(&mut s, p, gen.probe_spread);
                        let b = random_point(&mut s, p, gen.probe_spread);
                        let target = pred(&a) + pred(&b);
                        Constraint {
                            id,
                            rule: Rule::PhysicalFeasibility { coefficients: vec![1.0, 1.0], target },
                            probes: vec![a, b],
                            tolerance: gen.feasibility_tolerance,
                        }
                    }
                };
                built = Some(candidate);
                break;
            }
            let c = built.ok_or_else(|| {
                Error::config("constraints.generator", format!("could not build a {} constraint", family.name()))
            })?;
            out.push(c);
        }
    }
    ConstraintSet::new(out)
}

const PERTURB_GAP: f64 = 0.05;

/// Rewrites `c` so that it fails on predictions `preds`. Returns `None` when
/// the family cannot be made to fail (e.g. a flat monotonicity chain).
fn break_constraint(c: &Constraint, preds: &[f64]) -> Option<Constraint> {
    let mut out = c.clone();
    let tol = c.tolerance;
    match &mut out.rule {
        Rule::TemporalMonotonicity => {
            out.probes.reverse();
        }
        Rule::CausalPrecedence { antecedent, consequent } => {
            std::mem::swap(antecedent, consequent);
        }
        Rule::CapacityBound { lower, upper } => {
            let width = *upper - *lower;
            let top = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *lower = top + tol + PERTURB_GAP;
            *upper = *lower + width;
        }
        Rule::PhysicalFeasibility { coefficients, target } => {
            let total: f64 = coefficients.iter().zip(preds).map(|(c, v)| c * v).sum();
            *target = total + tol + PERTURB_GAP;
        }
    }
    let new_preds: Vec<f64> = match (&c.rule, &out.rule) {
        (Rule::TemporalMonotonicity, _) => preds.iter().rev().copied().collect(),
        _ => preds.to_vec(),
    };
    (!out.holds(&new_preds)).then_some(out)
}

/// Rewrites `c` so that it passes on predictions `preds`.
fn repair_constraint(c: &Constraint, preds: &[f64]) -> Option<Constraint> {
    let mut out = c.clone();
    match &mut out.rule {
        Rule::TemporalMonotonicity => {
            let worst_drop = preds.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
            out.tolerance = worst_drop + EQUALITY_TOLERANCE;
        }
        Rule::CausalPrecedence { antecedent, consequent } => {
            out.tolerance = preds[*consequent] - preds[*antecedent] + EQUALITY_TOLERANCE;
        }
        Rule::CapacityBound { lower, upper } => {
            for &v in preds {
                *lower = lower.min(v);
                *upper = upper.max(v);
            }
        }
        Rule::PhysicalFeasibility { coefficients, target } => {
            *target = coefficients.iter().zip(preds).map(|(c, v)| c * v).sum();
        }
    }
    out.holds(preds).then_some(out)
}

/// Perturbs constraints (tightening or contradicting their rules) so that
/// the realized violation rate of the reference model, `1 - s(ref)`, lands
/// within 0.02 of `target_rho`. A target of 0 returns the set unchanged.
pub fn inject_violations(
    set: &ConstraintSet,
    target_rho: f64,
    spec: &ModelSpec,
    reference: &ParamVector,
    seed: u64,
) -> Result<ConstraintSet> {
    if !(0.0..=1.0).contains(&target_rho) {
        return Err(Error::Input(format!("target violation rate {target_rho} outside [0, 1]")));
    }
    if target_rho == 0.0 {
        return Ok(set.clone());
    }
    let m = set.len();
    if m == 0 {
        return Err(Error::Calibration("cannot inject violations into an empty constraint set".into()));
    }
    let want = (target_rho * m as f64).round() as usize;
    let mut out = set.constraints.clone();
    let preds: Vec<Vec<f64>> = out.iter().map(|c| c.predictions(spec, reference)).collect::<Result<_>>()?;
    let mut failing: Vec<usize> = (0..m).filter(|&i| !out[i].holds(&preds[i])).collect();
    let mut passing: Vec<usize> = (0..m).filter(|&i| out[i].holds(&preds[i])).collect();
    let mut s = Stream::for_phase(seed, Phase::Injection, 0, 0);
    s.shuffle(&mut failing);
    s.shuffle(&mut passing);
    let mut n_fail = failing.len();
    if n_fail < want {
        for i in passing {
            if n_fail == want {
                break;
            }
            if let Some(c) = break_constraint(&out[i], &preds[i]) {
                out[i] = c;
                n_fail += 1;
            }
        }
    } else {
        for i in failing {
            if n_fail == want {
                break;
            }
            if let Some(c) = repair_constraint(&out[i], &preds[i]) {
                out[i] = c;
                n_fail -= 1;
            }
        }
    }
    let result = ConstraintSet::new(out)?;
    let realized = 1.0 - validity_score(&result, spec, reference)?.score;
    if (realized - target_rho).abs() > 0.02 + 1e-12 {
        return Err(Error::Calibration(format!(
            "realized violation rate {realized:.4} is not within 0.02 of {target_rho} (M = {m})"
        )));
    }
    Ok(result)
}

/// Axis-aligned parameter box for hypothesis-space sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SamplingBox {
    /// `[-half_width, half_width]^d`.
    pub fn cube(d: usize, half_width: f64) -> Self {
        Self { lower: vec![-half_width; d], upper: vec![half_width; d] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSpaceEstimate {
    pub theta: f64,
    pub num_samples: usize,
    /// Wilson 95% interval.
    pub interval: (f64, f64),
    /// Set when no sampled point satisfied every constraint.
    pub no_satisfying_samples: bool,
    pub sampling_box: SamplingBox,
}

pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    let n_f = n as f64;
    let phat = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (phat + z2 / (2.0 * n_f)) / denom;
    let half = z * (phat * (1.0 - phat) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Fraction of uniform samples from `sampling_box` that satisfy every
/// constraint.
pub fn estimate_theta(
    set: &ConstraintSet,
    spec: &ModelSpec,
    sampling_box: &SamplingBox,
    num_samples: usize,
    seed: u64,
) -> Result<HypothesisSpaceEstimate> {
    if num_samples < 1000 {
        return Err(Error::config("num_samples", "hypothesis-space estimation needs at least 1000 samples"));
    }
    let d = spec.param_count();
    if sampling_box.lower.len() != d || sampling_box.upper.len() != d {
        return Err(Error::DimensionMismatch { context: "sampling box", expected: d, found: sampling_box.lower.len() });
    }
    let mut s = Stream::for_phase(seed, Phase::Theta, 0, 0);
    let mut hits = 0usize;
    let mut w = vec![0.0; d];
    for _ in 0..num_samples {
        for ((wi, lo), hi) in w.iter_mut().zip(&sampling_box.lower).zip(&sampling_box.upper) {
            *wi = lo + (hi - lo) * s.uniform();
        }
        let params = ParamVector::new(w.clone())?;
        let mut ok = true;
        for c in &set.constraints {
            if !evaluate_constraint(c, spec, &params)? {
                ok = false;
                break;
            }
        }
        hits += ok as usize;
    }
    let theta = hits as f64 / num_samples as f64;
    let (lo, hi) = wilson_interval(hits, num_samples, 1.959_963_984_540_054);
    Ok(HypothesisSpaceEstimate {
        theta,
        num_samples,
        interval: (lo.min(theta), hi.max(theta)),
        no_satisfying_samples: hits == 0,
        sampling_box: sampling_box.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_ground_truth;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn capacity(id: usize, lower: f64, upper: f64, probes: Vec<Vec<f64>>) -> Constraint {
        Constraint { id, rule: Rule::CapacityBound { lower, upper }, probes, tolerance: 0.0 }
    }

    #[test]
    fn logistic_capacity_unit_interval_always_holds() {
        let spec = ModelSpec::logistic(2);
        let c = capacity(0, 0.0, 1.0, vec![vec![100.0, -3.0], vec![0.0, 0.0], vec![-50.0, 9.0]]);
        let mut s = Stream::new(1);
        for _ in 0..500 {
            let w = pv(&[10.0 * s.normal(), 10.0 * s.normal(), 10.0 * s.normal()]);
            assert!(evaluate_constraint(&c, &spec, &w).unwrap());
        }
    }

    #[test]
    fn positive_linear_model_is_monotone_on_increasing_probes() {
        let spec = ModelSpec::linear(3);
        let c = Constraint {
            id: 0,
            rule: Rule::TemporalMonotonicity,
            probes: vec![vec![0.0, 0.0, 0.0], vec![0.1, 0.5, 0.2], vec![1.0, 0.5, 0.3], vec![2.0, 2.0, 2.0]],
            tolerance: 0.0,
        };
        assert!(evaluate_constraint(&c, &spec, &pv(&[0.3, 1.2, 0.01, -4.0])).unwrap());
    }

    #[test]
    fn monotonicity_violated_at_second_probe() {
        // Predictions by direct enumeration: w = (1, -2), b = 0.
        let spec = ModelSpec::linear(2);
        let w = pv(&[1.0, -2.0, 0.0]);
        let probes = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, 0.0]];
        let preds: Vec<f64> = probes.iter().map(|x| x[0] - 2.0 * x[1]).collect();
        assert_eq!(preds, vec![0.0, -1.0, 3.0]);
        let brute = preds.windows(2).all(|w| w[1] >= w[0]);
        let c = Constraint { id: 0, rule: Rule::TemporalMonotonicity, probes, tolerance: 0.0 };
        assert_eq!(evaluate_constraint(&c, &spec, &w).unwrap(), brute);
        assert!(!brute);
    }

    #[test]
    fn causal_and_feasibility_rules() {
        let spec = ModelSpec::linear(1);
        let w = pv(&[2.0, 1.0]);
        let probes = vec![vec![1.0], vec![0.0]]; // preds 3, 1
        let causal = |a, c| Constraint {
            id: 0,
            rule: Rule::CausalPrecedence { antecedent: a, consequent: c },
            probes: probes.clone(),
            tolerance: EQUALITY_TOLERANCE,
        };
        assert!(evaluate_constraint(&causal(0, 1), &spec, &w).unwrap());
        assert!(!evaluate_constraint(&causal(1, 0), &spec, &w).unwrap());
        let phys = |target| Constraint {
            id: 1,
            rule: Rule::PhysicalFeasibility { coefficients: vec![1.0, -1.0], target },
            probes: probes.clone(),
            tolerance: EQUALITY_TOLERANCE,
        };
        assert!(evaluate_constraint(&phys(2.0), &spec, &w).unwrap());
        assert!(!evaluate_constraint(&phys(2.1), &spec, &w).unwrap());
    }

    #[test]
    fn probe_dimension_mismatch_is_error() {
        let spec = ModelSpec::logistic(3);
        let c = capacity(0, 0.0, 1.0, vec![vec![1.0, 2.0]]);
        assert!(matches!(evaluate_constraint(&c, &spec, &ParamVector::zeros(4)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn invalid_constraints_rejected() {
        assert!(ConstraintSet::new(vec![capacity(0, 1.0, 0.0, vec![vec![0.0]])]).is_err());
        assert!(ConstraintSet::new(vec![capacity(0, 0.0, 1.0, vec![])]).is_err());
        assert!(ConstraintSet::new(vec![capacity(3, 0.0, 1.0, vec![vec![0.0]]), capacity(3, 0.0, 1.0, vec![vec![0.0]])]).is_err());
    }

    #[test]
    fn validity_score_fractions() {
        let spec = ModelSpec::linear(1);
        let w = pv(&[1.0, 0.0]);
        let set = ConstraintSet::new(vec![
            capacity(0, 0.0, 2.0, vec![vec![1.0]]),
            capacity(1, 0.0, 2.0, vec![vec![1.5]]),
            capacity(2, 0.0, 2.0, vec![vec![0.5]]),
            capacity(3, 0.0, 2.0, vec![vec![3.0]]),
        ])
        .unwrap();
        let r = validity_score(&set, &spec, &w).unwrap();
        assert_eq!(r.score, 0.75);
        assert_eq!(r.bits, vec![true, true, true, false]);
        let all = ConstraintSet::new(set.constraints()[..3].to_vec()).unwrap();
        assert_eq!(validity_score(&all, &spec, &w).unwrap().score, 1.0);
        assert_eq!(validity_score(&ConstraintSet::empty(), &spec, &w).unwrap().score, 1.0);
    }

    #[test]
    fn large_random_rule_set_matches_recount() {
        let spec = ModelSpec::logistic(5);
        let truth = random_ground_truth(5, 2.0, 1);
        let gen = GeneratorSpec { per_family: [750; 4], ..Default::default() };
        let set = generate_consistent(&spec, &truth, &gen, 3).unwrap();
        assert_eq!(set.len(), 3000);
        let mut s = Stream::new(8);
        let w = pv(&(0..6).map(|_| s.normal()).collect::<Vec<_>>());
        let report = validity_score(&set, &spec, &w).unwrap();
        let recount = set.constraints().iter().filter(|c| evaluate_constraint(c, &spec, &w).unwrap()).count();
        assert_eq!(report.score, recount as f64 / 3000.0);
    }

    #[test]
    fn generated_constraints_hold_on_reference() {
        for spec in [ModelSpec::logistic(4), ModelSpec::linear(4), ModelSpec::mlp(4, 3)] {
            let truth = crate::model::initial_params(&spec, 5);
            let truth = if spec.kind == crate::model::ModelKind::Mlp { truth } else { random_ground_truth(4, 2.0, 5) };
            let set = generate_consistent(&spec, &truth, &GeneratorSpec::default(), 1).unwrap();
            assert_eq!(validity_score(&set, &spec, &truth).unwrap().score, 1.0, "{spec:?}");
        }
    }

    #[test]
    fn violation_rate_cases() {
        let r = |s: f64| ValidityReport { client_id: 0, bits: vec![], score: s };
        assert!((violation_rate(&[r(1.0), r(0.9), r(0.8)]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(violation_rate(&[r(1.0), r(1.0)]).unwrap(), 0.0);
        assert_eq!(violation_rate(&[r(0.0)]).unwrap(), 1.0);
        assert!(violation_rate(&[]).is_err());
    }

    fn reference_setup() -> (ModelSpec, ParamVector, ConstraintSet) {
        let spec = ModelSpec::logistic(4);
        let truth = random_ground_truth(4, 2.0, 2);
        let set = generate_consistent(&spec, &truth, &GeneratorSpec::default(), 7).unwrap();
        (spec, truth, set)
    }

    #[test]
    fn injection_hits_targets() {
        let (spec, truth, set) = reference_setup();
        assert_eq!(inject_violations(&set, 0.0, &spec, &truth, 1).unwrap(), set);
        for (target, lo, hi) in [(0.05, 0.03, 0.07), (0.18, 0.16, 0.20), (0.5, 0.48, 0.52)] {
            let injected = inject_violations(&set, target, &spec, &truth, 1).unwrap();
            let rho = 1.0 - validity_score(&injected, &spec, &truth).unwrap().score;
            assert!((lo..=hi).contains(&rho), "{target}: {rho}");
        }
    }

    #[test]
    fn injection_can_repair_towards_lower_targets() {
        let (spec, truth, set) = reference_setup();
        let heavy = inject_violations(&set, 0.4, &spec, &truth, 3).unwrap();
        let light = inject_violations(&heavy, 0.1, &spec, &truth, 3).unwrap();
        let rho = 1.0 - validity_score(&light, &spec, &truth).unwrap().score;
        assert!((rho - 0.1).abs() <= 0.02);
    }

    #[test]
    fn injection_granularity_failure_is_explicit() {
        let (spec, truth, set) = reference_setup();
        let tiny = ConstraintSet::new(set.constraints()[..3].to_vec()).unwrap();
        assert!(matches!(inject_violations(&tiny, 0.18, &spec, &truth, 1), Err(Error::Calibration(_))));
    }

    #[test]
    fn theta_empty_set_is_one() {
        let spec = ModelSpec::logistic(2);
        let est = estimate_theta(&ConstraintSet::empty(), &spec, &SamplingBox::cube(3, 5.0), 1000, 1).unwrap();
        assert_eq!(est.theta, 1.0);
        assert!(est.interval.0 <= 1.0 && est.interval.1 == 1.0);
    }

    #[test]
    fn theta_half_space_is_one_half() {
        // pred(x = 0) = sigmoid(b) <= 0.5  <=>  b <= 0: half of the box.
        let spec = ModelSpec::logistic(2);
        let set = ConstraintSet::new(vec![capacity(0, 0.0, 0.5, vec![vec![0.0, 0.0]])]).unwrap();
        let est = estimate_theta(&set, &spec, &SamplingBox::cube(3, 5.0), 20_000, 4).unwrap();
        assert!(est.interval.0 <= 0.5 && 0.5 <= est.interval.1, "{est:?}");
        assert!((est.theta - 0.5).abs() < 0.02);
    }

    #[test]
    fn theta_zero_hits_is_flagged_not_fatal() {
        let spec = ModelSpec::logistic(2);
        let set = ConstraintSet::new(vec![capacity(0, 2.0, 3.0, vec![vec![0.0, 0.0]])]).unwrap();
        let est = estimate_theta(&set, &spec, &SamplingBox::cube(3, 5.0), 1000, 4).unwrap();
        assert!(est.no_satisfying_samples);
        assert_eq!(est.interval.0, 0.0);
        assert!(estimate_theta(&set, &spec, &SamplingBox::cube(3, 5.0), 999, 4).is_err());
    }

    #[test]
    fn theta_can_be_tuned_to_reported_reduction() {
        // Bisect a capacity ceiling until the admitted fraction is ~0.37.
        let spec = ModelSpec::logistic(3);
        let probe = vec![vec![0.5, -0.2, 1.0]];
        let bx = SamplingBox::cube(4, 5.0);
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut est = None;
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let set = ConstraintSet::new(vec![capacity(0, 0.0, mid, probe.clone())]).unwrap();
            let e = estimate_theta(&set, &spec, &bx, 20_000, 9).unwrap();
            if e.theta < 0.37 {
                lo = mid
            } else {
                hi = mid
            }
            est = Some(e);
        }
        let e = est.unwrap();
        assert!((e.theta - 0.37).abs() < 0.01, "{e:?}");
    }

    #[test]
    fn jsonl_round_trip() {
        let (_, _, set) = reference_setup();
        let mut buf = Vec::new();
        set.write_jsonl(&mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
        assert!(first.contains("\"family\":\"temporal-monotonicity\""), "{first}");
        let back = ConstraintSet::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let text = "# header\n{\"id\":0,\"family\":\"capacity-bound\",\"lower\":0,\"upper\":1,\"probes\":[[0]]}\n{\"id\":1}\n";
        let err = ConstraintSet::read_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    proptest! {
        #[test]
        fn score_invariant_under_reordering(seed in any::<u64>()) {
            let (spec, _, set) = reference_setup();
            let mut s = Stream::new(seed);
            let w = pv(&(0..5).map(|_| 2.0 * s.normal()).collect::<Vec<_>>());
            let mut shuffled = set.constraints().to_vec();
            s.shuffle(&mut shuffled);
            let a = validity_score(&set, &spec, &w).unwrap().score;
            let b = validity_score(&ConstraintSet::new(shuffled).unwrap(), &spec, &w).unwrap().score;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn adding_constraints_never_raises_all_pass(seed in any::<u64>(), cut in 1usize..100) {
            // s = 1 iff every constraint passes; a superset can only fail more
            // constraints, so the superset's failure count is at least the
            // subset's.
            let (spec, _, set) = reference_setup();
            let mut s = Stream::new(seed);
            let w = pv(&(0..5).map(|_| 2.0 * s.normal()).collect::<Vec<_>>());
            let sub = ConstraintSet::new(set.constraints()[..cut].to_vec()).unwrap();
            let fails = |c: &ConstraintSet| validity_score(c, &spec, &w).unwrap().bits.iter().filter(|b| !**b).count();
            prop_assert!(fails(&set) >= fails(&sub));
            if validity_score(&set, &spec, &w).unwrap().score == 1.0 {
                prop_assert_eq!(validity_score(&sub, &spec, &w).unwrap().score, 1.0);
            }
        }

        #[test]
        fn rho_non_increasing_when_a_score_rises(scores in proptest::collection::vec(0.0f64..=1.0, 1..8), idx in 0usize..8, bump in 0.0f64..1.0) {
            let idx = idx % scores.len();
            let mk = |v: &[f64]| v.iter().map(|&s| ValidityReport { client_id: 0, bits: vec![], score: s }).collect::<Vec<_>>();
            let before = violation_rate(&mk(&scores)).unwrap();
            let mut raised = scores.clone();
            raised[idx] = (raised[idx] + bump).min(1.0);
            prop_assert!(violation_rate(&mk(&raised)).unwrap() <= before);
        }
    }

    #[test]
    fn theta_superset_not_larger() {
        let (spec, _, set) = reference_setup();
        let bx = SamplingBox::cube(5, 5.0);
        let sub = ConstraintSet::new(set.constraints()[..10].to_vec()).unwrap();
        let a = estimate_theta(&sub, &spec, &bx, 5000, 2).unwrap();
        let b = estimate_theta(&set, &spec, &bx, 5000, 2).unwrap();
        assert!(b.theta <= a.theta);
    }
}
