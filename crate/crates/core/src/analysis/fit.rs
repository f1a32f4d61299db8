//! Least-squares fitting: a small damped Gauss-Newton solver, ordinary
//! least squares with t-intervals, and the two fits used on run output.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::{Phase, Stream};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub count: usize,
    pub rss: f64,
    pub rmse: f64,
    pub max_abs: f64,
}

impl ResidualSummary {
    fn from_residuals(r: &[f64]) -> Self {
        let rss: f64 = r.iter().map(|v| v * v).sum();
        Self {
            count: r.len(),
            rss,
            rmse: (rss / r.len().max(1) as f64).sqrt(),
            max_abs: r.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub r_squared: f64,
    pub ci95: Vec<[f64; 2]>,
    pub residuals: ResidualSummary,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.params[i])
    }
}

/// `1 - RSS / TSS`. A response that is constant up to rounding scores 1
/// when fitted to rounding error and negative infinity otherwise.
pub fn r_squared(y: &[f64], fitted: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let rss: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b).powi(2)).sum();
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>() + 1.0;
    if tss <= 1e-24 * scale {
        return if rss <= 1e-24 * scale { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - rss / tss
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `None` when the matrix is numerically singular.
pub(crate) fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when `|step| <= step_tolerance * (|x| + step_tolerance)`.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 500, step_tolerance: 1e-10, initial_damping: 1e-3 }
    }
}

/// Levenberg-Marquardt on `sum_i r_i(x)^2`. `model(x)` returns the
/// residuals and their Jacobian (one row per residual).
pub fn levenberg_marquardt<F>(model: F, x0: &[f64], opts: LmOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>),
{
    let p = x0.len();
    let mut x = x0.to_vec();
    let (mut r, mut jac) = model(&x);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = opts.initial_damping;
    for _ in 0..opts.max_iterations {
        let mut jtj = vec![vec![0.0; p]; p];
        let mut jtr = vec![0.0; p];
        for (ri, row) in r.iter().zip(&jac) {
            for a in 0..p {
                jtr[a] += row[a] * ri;
                for b in 0..p {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        if jtj.iter().enumerate().all(|(i, row)| row[i] == 0.0) {
            return Err(Error::NoFit("design has no variation".into()));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut damped = jtj.clone();
            for i in 0..p {
                damped[i][i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(step) = solve_dense(damped, jtr.iter().map(|v| -v).collect()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + s).collect();
            let (tr, tj) = model(&trial);
            let tcost: f64 = tr.iter().map(|v| v * v).sum();
            if tcost.is_finite() && tcost <= cost {
                let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
                let x_norm = trial.iter().map(|s| s * s).sum::<f64>().sqrt();
                x = trial;
                r = tr;
                jac = tj;
                cost = tcost;
                lambda = (lambda * 0.1).max(1e-15);
                accepted = true;
                if step_norm <= opts.step_tolerance * (x_norm + opts.step_tolerance) {
                    return Ok(x);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: at a minimum to working precision.
            return Ok(x);
        }
    }
    Ok(x)
}

/// Ordinary least squares of `y` on the columns of `rows`, with
/// t-distribution 95% intervals.
pub fn ols(names: &[&str], rows: &[Vec<f64>], y: &[f64]) -> Result<FitResult> {
    let n = y.len();
    let p = names.len();
    if rows.len() != n || rows.iter().any(|r| r.len() != p) {
        return Err(Error::DimensionMismatch { context: "design matrix", expected: n, found: rows.len() });
    }
    if n < p {
        return Err(Error::NoFit(format!("{n} points for {p} parameters")));
    }
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (row, yi) in rows.iter().zip(y) {
        for a in 0..p {
            xty[a] += row[a] * yi;
            for b in 0..p {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let beta = solve_dense(xtx.clone(), xty).ok_or_else(|| Error::NoFit("singular design".into()))?;
    let fitted: Vec<f64> = rows.iter().map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let summary = ResidualSummary::from_residuals(&resid);
    let df = n - p;
    let ci95 = if df == 0 {
        beta.iter().map(|&b| [b, b]).collect()
    } else {
        let s2 = summary.rss / df as f64;
        let t = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::NoFit(e.to_string()))?.inverse_cdf(0.975);
        (0..p)
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                let col = solve_dense(xtx.clone(), e).unwrap_or_else(|| vec![f64::NAN; p]);
                let se = (s2 * col[j]).max(0.0).sqrt();
                [beta[j] - t * se, beta[j] + t * se]
            })
            .collect()
    };
    Ok(FitResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        params: beta,
        r_squared: r_squared(y, &fitted),
        ci95,
        residuals: summary,
    })
}

/// Fits `a / sqrt(t)` and, when `rho_bar > 0`, `b * rho_bar` to `(t, y)`.
fn convergence_point_fit(ts: &[f64], y: &[f64], rho_bar: f64) -> Result<Vec<f64>> {
    let with_b = rho_bar > 0.0;
    let model = |x: &[f64]| {
        let mut r = Vec::with_capacity(ts.len());
        let mut j = Vec::with_capacity(ts.len());
        for (&t, &yt) in ts.iter().zip(y) {
            let u = 1.0 / t.sqrt();
            let b = if with_b { x[1] } else { 0.0 };
            r.push(x[0] * u + b * rho_bar - yt);
            j.push(if with_b { vec![u, rho_bar] } else { vec![u] });
        }
        (r, j)
    };
    let x0 = if with_b { vec![y[0], 0.0] } else { vec![y[0]] };
    let x = levenberg_marquardt(model, &x0, LmOptions::default())?;
    Ok(vec![x[0], if with_b { x[1] } else { 0.0 }])
}

/// Fits `y_t = a / sqrt(t) + b * rho_bar` to a per-round series, `t = 1..n`,
/// where `rho_bar` is the mean of `rho_series`. `b` is pinned to zero when
/// every `rho` is zero. Intervals come from a percentile bootstrap over
/// resampled rounds.
pub fn fit_convergence_rate(series: &[f64], rho_series: &[f64], seed: u64) -> Result<FitResult> {
    let n = series.len();
    if n < 5 {
        return Err(Error::NoFit(format!("need at least 5 rounds, got {n}")));
    }
    if rho_series.len() != n {
        return Err(Error::DimensionMismatch { context: "rho series", expected: n, found: rho_series.len() });
    }
    if series.iter().chain(rho_series).any(|v| !v.is_finite()) {
        return Err(Error::NoFit("non-finite input".into()));
    }
    if series.iter().all(|&v| v == series[0]) {
        return Err(Error::NoFit("constant series".into()));
    }
    let rho_bar = rho_series.iter().sum::<f64>() / n as f64;
    let ts: Vec<f64> = (1..=n).map(|t| t as f64).collect();
    let params = convergence_point_fit(&ts, series, rho_bar)?;
    let fitted: Vec<f64> = ts.iter().map(|t| params[0] / t.sqrt() + params[1] * rho_bar).collect();
    let resid: Vec<f64> = series.iter().zip(&fitted).map(|(a, b)| a - b).collect();

    let mut stream = Stream::for_phase(seed, Phase::Bootstrap, 0, 0);
    let mut draws: [Vec<f64>; 2] = [Vec::with_capacity(BOOTSTRAP_RESAMPLES), Vec::with_capacity(BOOTSTRAP_RESAMPLES)];
    let (mut bt, mut by, mut br) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for i in 0..n {
            let j = stream.below(n);
            bt[i] = ts[j];
            by[i] = series[j];
            br[i] = rho_series[j];
        }
        let rb = br.iter().sum::<f64>() / n as f64;
        if let Ok(p) = convergence_point_fit(&bt, &by, rb) {
            draws[0].push(p[0]);
            draws[1].push(p[1]);
        }
    }
    let ci95 = draws
        .iter_mut()
        .zip(&params)
        .map(|(d, &est)| {
            if d.is_empty() {
                return [est, est];
            }
            d.sort_by(f64::total_cmp);
            [percentile(d, 0.025), percentile(d, 0.975)]
        })
        .collect();
    Ok(FitResult {
        names: vec!["a".into(), "b".into()],
        r_squared: r_squared(series, &fitted),
        params,
        ci95,
        residuals: ResidualSummary::from_residuals(&resid),
    })
}

/// Linear interpolation between order statistics of a sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationFit {
    pub fit: FitResult,
    /// Intercept `F* - eps_opt`.
    pub intercept: f64,
    /// Negated slope.
    pub delta_max: f64,
    pub f_star: Option<f64>,
    pub eps_opt: Option<f64>,
    pub threshold: Option<f64>,
}

fn distinct_count(xs: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// OLS of metric on violation rate over points with `rho < threshold`.
/// With a known optimum `f_star`, `eps_opt = f_star - intercept`.
pub fn violation_fit(points: &[(f64, f64)], threshold: Option<f64>, f_star: Option<f64>) -> Result<ViolationFit> {
    let kept: Vec<(f64, f64)> = points.iter().copied().filter(|(r, _)| threshold.is_none_or(|t| *r < t)).collect();
    if kept.iter().any(|(r, m)| !r.is_finite() || !m.is_finite()) {
        return Err(Error::NoFit("non-finite point".into()));
    }
    if distinct_count(kept.iter().map(|p| p.0)) < 4 {
        return Err(Error::NoFit("need at least 4 distinct violation rates".into()));
    }
    let rows: Vec<Vec<f64>> = kept.iter().map(|(r, _)| vec![1.0, *r]).collect();
    let y: Vec<f64> = kept.iter().map(|p| p.1).collect();
    let fit = ols(&["intercept", "slope"], &rows, &y)?;
    Ok(ViolationFit {
        intercept: fit.params[0],
        delta_max: -fit.params[1],
        f_star,
        eps_opt: f_star.map(|f| f - fit.params[0]),
        threshold,
        fit,
    })
}

/// Continuous hinge model `c0 + c1 rho + c2 max(0, rho - knot)`.
pub fn piecewise_fit(points: &[(f64, f64)], knot: f64) -> Result<FitResult> {
    let rows: Vec<Vec<f64>> = points.iter().map(|(r, _)| vec![1.0, *r, (r - knot).max(0.0)]).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    ols(&["intercept", "slope", "hinge"], &rows, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityComparison {
    pub linear_below: FitResult,
    pub linear_all: FitResult,
    pub piecewise_all: Option<FitResult>,
}

impl LinearityComparison {
    /// The straight line explains the sub-threshold points at least as well
    /// as it explains the full sweep.
    pub fn linear_region_fits_better(&self) -> bool {
        self.linear_below.r_squared >= self.linear_all.r_squared
    }
}

pub fn compare_linearity(points: &[(f64, f64)], threshold: f64) -> Result<LinearityComparison> {
    let below = violation_fit(points, Some(threshold), None)?.fit;
    let rows: Vec<Vec<f64>> = points.iter().map(|(r, _)| vec![1.0, *r]).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let all = ols(&["intercept", "slope"], &rows, &y)?;
    Ok(LinearityComparison { linear_below: below, linear_all: all, piecewise_all: piecewise_fit(points, threshold).ok() })
}
