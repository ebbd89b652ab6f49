//! File formats: observation and state CSVs, JSON documents.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measurement::Observations;
use crate::model::StatePath;

/// Writes `t, y1..yq` with one row per timepoint (t starts at 1).
pub fn write_observations(path: &Path, data: &Observations) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=data.n_items()).map(|i| format!("y{i}")))
        .collect();
    write_table(path, &header, data.len(), |t| data.row(t).iter().map(|v| format_value(*v)).collect())
}

/// Writes `t, x1..xp`.
pub fn write_states(path: &Path, states: &StatePath) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=states.n_states()).map(|i| format!("x{i}")))
        .collect();
    write_table(path, &header, states.len(), |t| states.row(t).iter().map(|v| format!("{v}")).collect())
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn write_table(path: &Path, header: &[String], rows: usize, row: impl Fn(usize) -> Vec<String>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for t in 0..rows {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(row(t));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_table(path: &Path, prefix: char) -> Result<(usize, Vec<f64>, usize)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let cols = header.len();
    if cols < 2 || header.get(0).map(str::trim) != Some("t") {
        return Err(Error::invalid(format!("{}: header must start with 't'", path.display())));
    }
    for (i, name) in header.iter().enumerate().skip(1) {
        if name.trim() != format!("{prefix}{i}") {
            return Err(Error::invalid(format!(
                "{}: column {} is '{name}', expected '{prefix}{i}'",
                path.display(),
                i + 1
            )));
        }
    }
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::invalid(format!("{}: row {} has {} fields", path.display(), line + 1, rec.len())));
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::invalid(format!("{}: row {}: '{field}' is not a number", path.display(), line + 1))
            })?;
            values.push(v);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::invalid(format!("{}: no data rows", path.display())));
    }
    Ok((cols - 1, values, n_rows))
}

pub fn read_observations(path: &Path) -> Result<Observations> {
    let (q, values, _) = read_table(path, 'y')?;
    Observations::new(q, values)
}

pub fn read_states(path: &Path) -> Result<StatePath> {
    let (p, values, _) = read_table(path, 'x')?;
    StatePath::new(p, values)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
