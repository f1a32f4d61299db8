use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::engine::{rounds_to_convergence, ExperimentOutput};
use crate::error::{Error, Result};

/// Headline numbers of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub rounds_to_convergence: Option<usize>,
    pub final_metric: f64,
    pub mean_rho: f64,
    /// Mean of the finite per-round SNR values.
    pub mean_snr: Option<f64>,
}

impl RunResult {
    pub fn from_output(variant: &str, seed: u64, out: &ExperimentOutput) -> Self {
        let n = out.records.len().max(1) as f64;
        let snrs: Vec<f64> = out.records.iter().filter_map(|r| r.snr).filter(|s| s.is_finite()).collect();
        Self {
            variant: variant.to_string(),
            seed,
            rounds_to_convergence: rounds_to_convergence(&out.records),
            final_metric: out.records.last().map_or(f64::NAN, |r| r.metric),
            mean_rho: out.records.iter().map(|r| r.rho).sum::<f64>() / n,
            mean_snr: (!snrs.is_empty()).then(|| snrs.iter().sum::<f64>() / snrs.len() as f64),
        }
    }
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "cell_id",
    "variant",
    "alpha",
    "epsilon",
    "target_rho",
    "seed",
    "rounds_to_convergence",
    "final_metric",
    "mean_rho",
    "utility_loss",
    "mean_snr",
    "nonprivate_metric",
];

/// One sweep cell. `epsilon` is empty for non-private cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell_id: String,
    pub variant: String,
    pub alpha: f64,
    pub epsilon: Option<f64>,
    pub target_rho: f64,
    pub seed: u64,
    pub rounds_to_convergence: Option<usize>,
    pub final_metric: f64,
    pub mean_rho: f64,
    pub utility_loss: Option<f64>,
    pub mean_snr: Option<f64>,
    pub nonprivate_metric: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.cell_id.clone(),
            r.variant.clone(),
            fmt_f64(r.alpha),
            opt(r.epsilon),
            fmt_f64(r.target_rho),
            r.seed.to_string(),
            r.rounds_to_convergence.map(|v| v.to_string()).unwrap_or_default(),
            fmt_f64(r.final_metric),
            fmt_f64(r.mean_rho),
            opt(r.utility_loss),
            opt(r.mean_snr),
            opt(r.nonprivate_metric),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Column lookup that reports missing columns by name.
pub(crate) struct Columns {
    file: String,
    headers: csv::StringRecord,
}

impl Columns {
    pub(crate) fn new(file: &str, headers: csv::StringRecord) -> Self {
        Self { file: file.to_string(), headers }
    }

    pub(crate) fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { file: self.file.clone(), column: name.to_string() })
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec.get(idx).unwrap_or("").trim().parse().map_err(|e| Error::Input(format!("summary row {line}, column {name}: {e}")))
}

fn opt_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if rec.get(idx).unwrap_or("").trim().is_empty() {
        Ok(None)
    } else {
        field(rec, idx, name, line).map(Some)
    }
}

pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let cols = Columns::new("summary.csv", r.headers()?.clone());
    let mut idx = [0usize; 12];
    for (slot, name) in idx.iter_mut().zip(SUMMARY_COLUMNS) {
        *slot = cols.index(name)?;
    }
    let c = SUMMARY_COLUMNS;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        rows.push(SummaryRow {
            cell_id: rec.get(idx[0]).unwrap_or("").to_string(),
            variant: rec.get(idx[1]).unwrap_or("").to_string(),
            alpha: field(&rec, idx[2], c[2], line)?,
            epsilon: opt_field(&rec, idx[3], c[3], line)?,
            target_rho: field(&rec, idx[4], c[4], line)?,
            seed: field(&rec, idx[5], c[5], line)?,
            rounds_to_convergence: opt_field(&rec, idx[6], c[6], line)?,
            final_metric: field(&rec, idx[7], c[7], line)?,
            mean_rho: field(&rec, idx[8], c[8], line)?,
            utility_loss: opt_field(&rec, idx[9], c[9], line)?,
            mean_snr: opt_field(&rec, idx[10], c[10], line)?,
            nonprivate_metric: opt_field(&rec, idx[11], c[11], line)?,
        });
    }
    Ok(rows)
}
