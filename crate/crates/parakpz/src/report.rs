//! Versioned JSON reports, CSV tables and run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub kind: String,
    pub results: T,
}

pub fn emit_report<T: Serialize>(kind: &str, results: &T, path: &Path) -> Result<()> {
    let r = Report { schema_version: crate::SCHEMA_VERSION, kind: kind.to_string(), results };
    std::fs::write(path, serde_json::to_string_pretty(&r)? + "\n")?;
    Ok(())
}

pub fn read_report<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Report<T>> {
    let r: Report<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if r.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::Format(format!("schema version {} not supported", r.schema_version)));
    }
    Ok(r)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Numeric table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Format(format!("row of {} values under {} columns", r.len(), header.len())));
        }
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Table whose first column is a label.
pub fn write_labelled_csv(path: &Path, header: &[&str], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for (label, r) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(r.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            rec.iter().map(|v| v.parse::<f64>().map_err(|e| Error::Format(e.to_string()))).collect()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Everything needed to repeat a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seeds: Vec<u64>,
    /// The full configuration in `key = value` form.
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: &Config) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: args.to_vec(),
            seeds: config.seeds.clone(),
            config: config.emit(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
