//! CSV and JSON reading and writing.
//!
//! Floats go out as `{:.16e}`, 17 significant digits, so every value
//! round-trips and identical runs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::failure::Failure;

pub fn float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Rows of one output file, kept in memory until written.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_floats(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&v| float(v)).collect());
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let fail = |e: csv::Error| Failure::io(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(fail)?;
        w.write_record(&self.header).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r).map_err(fail)?;
        }
        w.flush().map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::io(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
}

pub fn output_dir(dir: &Path) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

/// Reads a headed CSV file whose header must contain `columns`; every
/// failure names the offending line.
pub fn read_rows<T: DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<T>, Failure> {
    let name = path.display();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::input(format!("{name}: {e}")))?;
    let header = rdr
        .headers()
        .map_err(|e| Failure::input(format!("{name}: line 1: {e}")))?
        .clone();
    let missing: Vec<&str> = columns.iter().copied().filter(|c| !header.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(Failure::input(format!(
            "{name}: line 1: header lacks column(s) {}; expected {}",
            missing.join(", "),
            columns.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Failure::input(format!("{name}: line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: T = rec
            .deserialize(Some(&header))
            .map_err(|e| Failure::input(format!("{name}: line {line}: {e}")))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::input(format!("{name}: no data rows")));
    }
    Ok(rows)
}
