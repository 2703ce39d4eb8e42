//! The one CSV dialect every exporter in the crate speaks.
//!
//! Comma separator, one header row, `\n` line endings, no quoting (no field
//! ever contains a comma), and floats printed in scientific notation with 17
//! significant digits so that parsing a file back reproduces the original
//! bits. Keeping the dialect in one place is what makes "re-running a config
//! yields byte-identical outputs" a local property instead of a hope.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Formats a float with 17 significant digits, enough to round-trip any f64.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses a float written by [`format_f64`] (or any standard float literal).
pub fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        reason: format!("expected a float, got {s:?}"),
    })
}

/// Incremental writer for one CSV file in the crate dialect.
pub struct CsvWriter {
    out: Vec<u8>,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> CsvWriter {
        let mut out = Vec::new();
        let _ = writeln!(out, "{}", header.join(","));
        CsvWriter {
            out,
            columns: header.len(),
        }
    }

    /// Writes one row of already-formatted fields.
    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.columns, "row width mismatch");
        let _ = writeln!(self.out, "{}", fields.join(","));
    }

    pub fn finish(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &self.out).map_err(|e| Error::io(path, e))
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.out
    }
}

/// Reads a CSV file in the crate dialect, returning the header and rows of
/// raw string fields. Validates rectangularity but not field types.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        reason: "empty file".to_string(),
    })?;
    let header: Vec<String> = header_line.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: format!("expected {} fields, got {}", header.len(), fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok((header, rows))
}
