use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{self, Zone};
use crate::data;
use crate::engine::{read_rounds_csv, write_rounds_csv, AlgorithmVariant, RoundRow};
use crate::error::{Error, Result};
use crate::model::ParamVector;

use super::config::{load_config, parse_json, ConstraintSource, ExperimentConfig, Manifest};
use super::io::{write_atomic, write_model_bin};
use super::prepare::prepare;
use super::summary::{read_summary_csv, write_summary_csv, RunResult, SummaryRow};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    /// Keep only variants with these names; empty keeps all.
    pub variants: Vec<String>,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed_override {
            cfg.seeds = vec![s];
        }
        if !self.variants.is_empty() {
            cfg.variants.retain(|v| self.variants.iter().any(|n| n == v.name()));
            if cfg.variants.is_empty() {
                return Err(Error::config("variants", format!("no variant matches {:?}", self.variants)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub rows: Vec<RoundRow>,
    pub results: Vec<RunResult>,
    pub models: Vec<(String, ParamVector)>,
}

fn to_pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Runs every (seed, variant) pair of a validated config and writes the
/// manifest, rounds CSV and final models into `out`.
pub fn run_config(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut models = Vec::new();
    for &seed in &cfg.seeds {
        let prepared = prepare(cfg, seed)?;
        if cfg.data.export {
            let mut buf = Vec::new();
            data::write_csv(&prepared.dataset, &mut buf)?;
            write_atomic(&out.join(format!("dataset_seed{seed}.csv")), &buf)?;
        }
        if cfg.constraints.source != ConstraintSource::None {
            let mut buf = Vec::new();
            prepared.constraints.write_jsonl(&mut buf)?;
            write_atomic(&out.join(format!("constraints_seed{seed}.jsonl")), &buf)?;
        }
        for variant in &cfg.variants {
            let output = prepared.run(variant)?;
            let name = variant.name();
            results.push(RunResult::from_output(name, seed, &output));
            rows.extend(output.records.iter().map(|r| RoundRow { variant: name.to_string(), seed, record: r.clone() }));
            models.push((format!("{name}/{seed}"), output.final_params));
        }
    }
    let mut csv_bytes = Vec::new();
    write_rounds_csv(&rows, &mut csv_bytes)?;
    write_atomic(&out.join(ROUNDS_FILE), &csv_bytes)?;
    let mut bin = Vec::new();
    write_model_bin(&models, &mut bin)?;
    write_atomic(&out.join(MODEL_FILE), &bin)?;
    write_atomic(&out.join(MANIFEST_FILE), &to_pretty_json(&Manifest::new(cfg.clone()))?)?;
    Ok(RunArtifacts { dir: out.to_path_buf(), rows, results, models })
}

/// `run`: loads a config or manifest, applies overrides and runs it.
pub fn cmd_run(config_path: &Path, out: &Path, opts: &RunOptions) -> Result<RunArtifacts> {
    let mut cfg = load_config(config_path)?;
    opts.apply(&mut cfg)?;
    cfg.validate()?;
    run_config(&cfg, out)
}

/// Grid axes; an absent axis keeps the base config's value, an empty one
/// is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub variants: Option<Vec<AlgorithmVariant>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    /// `null` entries are non-private cells.
    #[serde(default)]
    pub epsilon: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub target_rho: Option<Vec<f64>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub sweep_id: String,
    /// Inline config object, or a path to one relative to the sweep file.
    pub base: Value,
    #[serde(default)]
    pub grid: SweepGrid,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub id: String,
    pub variant: AlgorithmVariant,
    pub alpha: f64,
    pub epsilon: Option<f64>,
    pub target_rho: f64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

fn axis<T: Clone>(values: &Option<Vec<T>>, default: Vec<T>, name: &str) -> Result<Vec<T>> {
    match values {
        Some(v) if v.is_empty() => Err(Error::config(format!("grid.{name}"), "axis must not be empty")),
        Some(v) => Ok(v.clone()),
        None => Ok(default),
    }
}

fn label(v: f64) -> String {
    format!("{v}")
}

/// Expands the grid in the order alpha, epsilon, target rho, variant, seed.
pub fn expand_grid(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    let variants = axis(&grid.variants, base.variants.clone(), "variants")?;
    let alphas = axis(&grid.alpha, vec![base.partition.alpha], "alpha")?;
    let base_eps = base.privacy.enabled.then_some(base.privacy.epsilon);
    let epsilons = axis(&grid.epsilon, vec![base_eps], "epsilon")?;
    let rhos = axis(&grid.target_rho, vec![base.constraints.inject_rho], "target_rho")?;
    let seeds = axis(&grid.seeds, base.seeds.clone(), "seeds")?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("grid", "grid has no cells"));
    }
    let mut cells = Vec::new();
    for &alpha in &alphas {
        for &epsilon in &epsilons {
            for &target_rho in &rhos {
                for variant in &variants {
                    for &seed in &seeds {
                        let mut config = base.clone();
                        config.partition.alpha = alpha;
                        match epsilon {
                            Some(e) => {
                                config.privacy.enabled = true;
                                config.privacy.epsilon = e;
                            }
                            None => config.privacy.enabled = false,
                        }
                        config.constraints.inject_rho = target_rho;
                        config.variants = vec![*variant];
                        config.seeds = vec![seed];
                        config.validate()?;
                        let eps = epsilon.map_or("np".to_string(), label);
                        let id = format!("{}_a{}_e{}_r{}_s{}", variant.name(), label(alpha), eps, label(target_rho), seed);
                        cells.push(SweepCell { id, variant: *variant, alpha, epsilon, target_rho, seed, config });
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell_id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepArtifacts {
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<CellFailure>,
}

pub fn load_sweep(path: &Path) -> Result<(SweepSpec, ExperimentConfig)> {
    let text = fs::read_to_string(path)?;
    let spec: SweepSpec = parse_json(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let base = match &spec.base {
        Value::String(p) => load_config(&dir.join(p))?,
        Value::Object(_) => {
            let mut cfg: ExperimentConfig = parse_json(&spec.base.to_string()).map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("base.{field}"), message),
                other => other,
            })?;
            cfg.anchor_paths(dir);
            cfg.validate()?;
            cfg
        }
        _ => return Err(Error::config("base", "expected a config object or a path")),
    };
    if spec.sweep_id.is_empty() || spec.sweep_id.contains(['/', '\\']) || spec.sweep_id.starts_with('.') {
        return Err(Error::config("sweep_id", "must be a plain directory name"));
    }
    Ok((spec, base))
}

fn run_cell(cell: &SweepCell, dir: &Path) -> Result<SummaryRow> {
    let art = run_config(&cell.config, dir)?;
    let result = &art.results[0];
    let (utility_loss, nonprivate_metric) = if cell.config.privacy.enabled {
        let mut twin = cell.config.clone();
        twin.privacy.enabled = false;
        let prepared = prepare(&twin, cell.seed)?;
        let out = prepared.run(&cell.variant)?;
        let np = RunResult::from_output(cell.variant.name(), cell.seed, &out).final_metric;
        (analysis::utility_loss(result.final_metric, np).ok(), Some(np))
    } else {
        (None, None)
    };
    Ok(SummaryRow {
        cell_id: cell.id.clone(),
        variant: cell.variant.name().to_string(),
        alpha: cell.alpha,
        epsilon: cell.epsilon,
        target_rho: cell.target_rho,
        seed: cell.seed,
        rounds_to_convergence: result.rounds_to_convergence,
        final_metric: result.final_metric,
        mean_rho: result.mean_rho,
        utility_loss,
        mean_snr: result.mean_snr,
        nonprivate_metric,
    })
}

/// Runs every cell of a sweep in a worker pool. Failed cells are recorded
/// in `failures.json` and left out of the summary.
pub fn run_sweep(spec: &SweepSpec, base: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<SweepArtifacts> {
    let mut base = base.clone();
    opts.apply(&mut base)?;
    let mut grid = spec.grid.clone();
    if let Some(s) = opts.seed_override {
        grid.seeds = Some(vec![s]);
    }
    if !opts.variants.is_empty() {
        if let Some(v) = grid.variants.as_mut() {
            v.retain(|x| opts.variants.iter().any(|n| n == x.name()));
        }
    }
    let cells = expand_grid(&base, &grid)?;
    let dir = out.join(&spec.sweep_id);
    fs::create_dir_all(&dir)?;
    let workers = spec.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let outcomes: Vec<Result<SummaryRow>> = pool.install(|| cells.par_iter().map(|c| run_cell(c, &dir.join(&c.id))).collect());

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell.id);
                failures.push(CellFailure { cell_id: cell.id.clone(), kind: e.kind().to_string(), message: e.to_string() });
            }
        }
    }
    let mut buf = Vec::new();
    write_summary_csv(&rows, &mut buf)?;
    write_atomic(&dir.join(SUMMARY_FILE), &buf)?;
    write_atomic(&dir.join(FAILURES_FILE), &to_pretty_json(&failures)?)?;
    Ok(SweepArtifacts { dir, rows, failures })
}

/// `sweep`: expands the grid of a sweep file and runs every cell.
pub fn cmd_sweep(sweep_path: &Path, out: &Path, opts: &RunOptions) -> Result<SweepArtifacts> {
    let (spec, base) = load_sweep(sweep_path)?;
    run_sweep(&spec, &base, out, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FitKind {
    Convergence,
    Violation,
    Zones,
}

impl FitKind {
    pub fn name(&self) -> &'static str {
        match self {
            FitKind::Convergence => "convergence",
            FitKind::Violation => "violation",
            FitKind::Zones => "zones",
        }
    }
}

fn read_rounds(dir: &Path) -> Result<(PathBuf, Vec<RoundRow>)> {
    let path = dir.join(ROUNDS_FILE);
    let rows = read_rounds_csv(BufReader::new(File::open(&path)?))?;
    Ok((path, rows))
}

fn read_summary(dir: &Path) -> Result<(PathBuf, Vec<SummaryRow>)> {
    let path = dir.join(SUMMARY_FILE);
    let rows = read_summary_csv(BufReader::new(File::open(&path)?))?;
    Ok((path, rows))
}

fn keep(variants: &[String], name: &str) -> bool {
    variants.is_empty() || variants.iter().any(|v| v == name)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn fit_or_error<T: Serialize>(r: Result<T>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.kind(), "message": e.to_string() }),
    }
}

fn convergence_report(dir: &Path, variants: &[String]) -> Result<Value> {
    let (path, rows) = read_rounds(dir)?;
    let mut groups: BTreeMap<(String, u64), Vec<&RoundRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| keep(variants, &r.variant)) {
        groups.entry((r.variant.clone(), r.seed)).or_default().push(r);
    }
    let fits: Vec<Value> = groups
        .iter()
        .map(|((variant, seed), rs)| {
            let y: Vec<f64> = rs.iter().map(|r| r.record.grad_norm_sq).collect();
            let rho: Vec<f64> = rs.iter().map(|r| r.record.rho).collect();
            json!({
                "variant": variant,
                "seed": seed,
                "rounds": y.len(),
                "rho_bar": rho.iter().sum::<f64>() / rho.len().max(1) as f64,
                "grad_norm_sq": y,
                "rho": rho,
                "fit": fit_or_error(analysis::fit_convergence_rate(&y, &rho, *seed)),
            })
        })
        .collect();
    Ok(json!({
        "kind": "convergence",
        "model": "grad_norm_sq(t) = a / sqrt(t) + b * mean(rho)",
        "inputs": { "file": path, "rows": rows.len(), "columns": ["variant", "seed", "round", "grad_norm_sq", "rho"] },
        "fits": fits,
    }))
}

fn violation_report(dir: &Path, variants: &[String]) -> Result<Value> {
    let (path, rows) = read_summary(dir)?;
    let mut by_variant: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| keep(variants, &r.variant)) {
        by_variant.entry(r.variant.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (variant, rs) in &by_variant {
        let points: Vec<(f64, f64)> = rs.iter().map(|r| (r.mean_rho, r.final_metric)).collect();
        let mut seeds: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rs {
            seeds.entry(r.seed).or_default().push((r.mean_rho, r.final_metric));
        }
        let per_seed: Vec<Value> = seeds
            .iter()
            .map(|(seed, pts)| json!({ "seed": seed, "points": pts, "fit": fit_or_error(analysis::violation_fit(pts, None, None)) }))
            .collect();
        let seed_fits: Vec<analysis::ViolationFit> = seeds.values().filter_map(|pts| analysis::violation_fit(pts, None, None).ok()).collect();
        out.push(json!({
            "variant": variant,
            "points": points,
            "pooled": fit_or_error(analysis::violation_fit(&points, None, None)),
            "linearity": fit_or_error(analysis::compare_linearity(&points, analysis::CRITICAL_THRESHOLD)),
            "per_seed": per_seed,
            "median_slope": median(seed_fits.iter().map(|f| f.fit.params[1]).collect()),
            "median_r_squared": median(seed_fits.iter().map(|f| f.fit.r_squared).collect()),
        }));
    }
    Ok(json!({
        "kind": "violation",
        "model": "final_metric = intercept + slope * mean_rho",
        "inputs": { "file": path, "rows": rows.len(), "columns": ["variant", "seed", "mean_rho", "final_metric"] },
        "fits": out,
    }))
}

fn zones_report(dir: &Path, variants: &[String]) -> Result<Value> {
    let (path, column, rhos): (PathBuf, &str, Vec<f64>) = if dir.join(ROUNDS_FILE).exists() {
        let (p, rows) = read_rounds(dir)?;
        (p, "rho", rows.iter().filter(|r| keep(variants, &r.variant)).map(|r| r.record.rho).collect())
    } else {
        let (p, rows) = read_summary(dir)?;
        (p, "mean_rho", rows.iter().filter(|r| keep(variants, &r.variant)).map(|r| r.mean_rho).collect())
    };
    let mut counts: BTreeMap<&str, usize> = Zone::ALL.iter().map(|z| (z.name(), 0)).collect();
    for &rho in &rhos {
        *counts.entry(analysis::classify_zone(rho)?.zone.name()).or_default() += 1;
    }
    Ok(json!({
        "kind": "zones",
        "thresholds": [analysis::WARNING_THRESHOLD, analysis::DANGER_THRESHOLD, analysis::CRITICAL_THRESHOLD],
        "inputs": { "file": path, "column": column, "rows": rhos.len() },
        "counts": counts,
    }))
}

/// `fit`: runs one analysis over a results directory and writes
/// `fit_<kind>.json` there (or to `out`).
pub fn cmd_fit(dir: &Path, kind: FitKind, variants: &[String], out: Option<&Path>) -> Result<Value> {
    let report = match kind {
        FitKind::Convergence => convergence_report(dir, variants)?,
        FitKind::Violation => violation_report(dir, variants)?,
        FitKind::Zones => zones_report(dir, variants)?,
    };
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(format!("fit_{}.json", kind.name())));
    write_atomic(&target, &to_pretty_json(&report)?)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.prec$}"))
}

/// `report`: plain-text summary of a run or sweep directory.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut text = String::new();
    if dir.join(SUMMARY_FILE).exists() {
        let (_, rows) = read_summary(dir)?;
        let mut by_variant: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
        for r in &rows {
            by_variant.entry(&r.variant).or_default().push(r);
        }
        text.push_str(&format!("sweep {} ({} cells)\n", dir.display(), rows.len()));
        text.push_str("variant        cells  median_metric  median_rounds  median_rho  median_utility_loss\n");
        for (v, rs) in by_variant {
            let m = median(rs.iter().map(|r| r.final_metric).collect());
            let rtc = median(rs.iter().filter_map(|r| r.rounds_to_convergence.map(|x| x as f64)).collect());
            let rho = median(rs.iter().map(|r| r.mean_rho).collect());
            let ul = median(rs.iter().filter_map(|r| r.utility_loss).collect());
            text.push_str(&format!(
                "{v:<14} {:>5}  {:>13}  {:>13}  {:>10}  {:>19}\n",
                rs.len(),
                fmt_opt(m, 4),
                fmt_opt(rtc, 1),
                fmt_opt(rho, 4),
                fmt_opt(ul, 2)
            ));
        }
        let failures = dir.join(FAILURES_FILE);
        if failures.exists() {
            let f: Vec<CellFailure> = serde_json::from_str(&fs::read_to_string(failures)?)?;
            text.push_str(&format!("failed cells: {}\n", f.len()));
        }
    } else {
        let (_, rows) = read_rounds(dir)?;
        let mut groups: BTreeMap<(String, u64), Vec<&RoundRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.variant.clone(), r.seed)).or_default().push(r);
        }
        text.push_str(&format!("run {}\n", dir.display()));
        text.push_str("variant        seed  rounds  final_metric  final_loss  rounds_to_90%  mean_rho  degenerate\n");
        for ((v, seed), rs) in groups {
            let records: Vec<_> = rs.iter().map(|r| r.record.clone()).collect();
            let last = records.last();
            text.push_str(&format!(
                "{v:<14} {seed:>4}  {:>6}  {:>12}  {:>10}  {:>13}  {:>8.4}  {:>10}\n",
                records.len(),
                fmt_opt(last.map(|r| r.metric), 4),
                fmt_opt(last.map(|r| r.global_loss), 4),
                crate::engine::rounds_to_convergence(&records).map_or("-".to_string(), |r| r.to_string()),
                records.iter().map(|r| r.rho).sum::<f64>() / records.len().max(1) as f64,
                records.iter().filter(|r| r.degenerate).count(),
            ));
        }
    }
    for kind in [FitKind::Convergence, FitKind::Violation, FitKind::Zones] {
        let p = dir.join(format!("fit_{}.json", kind.name()));
        if p.exists() {
            text.push_str(&format!("{} fit: {}\n", kind.name(), p.display()));
        }
    }
    Ok(text)
}
