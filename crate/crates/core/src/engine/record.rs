use std::io::{Read, Write};

use crate::data::fmt_f64;
use crate::error::{Error, Result};

use super::RoundRecord;

/// Column order of `rounds.csv`. List-valued columns are `;`-separated and
/// aligned with `participants`; `snr` is empty without privacy.
pub const ROUNDS_CSV_COLUMNS: [&str; 13] = [
    "variant",
    "seed",
    "round",
    "participants",
    "validity",
    "weights",
    "rho",
    "grad_norm_sq",
    "global_loss",
    "metric",
    "snr",
    "degenerate",
    "diverged",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub variant: String,
    pub seed: u64,
    pub record: RoundRecord,
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

pub fn write_rounds_csv<W: Write>(rows: &[RoundRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ROUNDS_CSV_COLUMNS)?;
    for row in rows {
        let r = &row.record;
        w.write_record([
            row.variant.clone(),
            row.seed.to_string(),
            r.round.to_string(),
            join(&r.participants, |v| v.to_string()),
            join(&r.validity, |v| fmt_f64(*v)),
            join(&r.weights, |v| fmt_f64(*v)),
            fmt_f64(r.rho),
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.global_loss),
            fmt_f64(r.metric),
            r.snr.map(fmt_f64).unwrap_or_default(),
            r.degenerate.to_string(),
            join(&r.diverged, |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, column: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field.trim().parse().map_err(|e| Error::Input(format!("rounds row {line}, column {column}: {e}")))
}

fn parse_list<T: std::str::FromStr>(field: &str, column: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(|f| parse(f, column, line)).collect()
}

pub fn read_rounds_csv<R: Read>(reader: R) -> Result<Vec<RoundRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let mut idx = [0usize; 13];
    for (slot, name) in idx.iter_mut().zip(ROUNDS_CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { file: "rounds.csv".into(), column: name.into() })?;
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let c = ROUNDS_CSV_COLUMNS;
        let snr = get(10);
        rows.push(RoundRow {
            variant: get(0).to_string(),
            seed: parse(get(1), c[1], line)?,
            record: RoundRecord {
                round: parse(get(2), c[2], line)?,
                participants: parse_list(get(3), c[3], line)?,
                validity: parse_list(get(4), c[4], line)?,
                weights: parse_list(get(5), c[5], line)?,
                rho: parse(get(6), c[6], line)?,
                grad_norm_sq: parse(get(7), c[7], line)?,
                global_loss: parse(get(8), c[8], line)?,
                metric: parse(get(9), c[9], line)?,
                snr: if snr.trim().is_empty() { None } else { Some(parse(snr, c[10], line)?) },
                degenerate: parse(get(11), c[11], line)?,
                diverged: parse_list(get(12), c[12], line)?,
                wall_time_secs: 0.0,
            },
        });
    }
    Ok(rows)
}
