//! Plot-ready CSV reports. Every row ends with the config hash of the run.

use std::path::Path;

use crate::error::{CliError, Result};

/// A CSV table under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    /// Appends one row; panics if the arity is wrong, which is a bug.
    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row arity");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes the table with a trailing `config_hash` column.
    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let csv_err = |e: csv::Error| CliError::Report(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(self.header.iter().map(String::as_str).chain(["config_hash"])).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(String::as_str).chain([config_hash])).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

/// Formats an optional number, leaving the cell empty for `None`.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads a CSV written by [`Table::write`] back as header plus rows.
pub fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let csv_err = |e: csv::Error| CliError::Report(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}
