//! Report files: CSV tables, aligned text tables, atomic writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::CliError;

/// Value written for quantities that could not be computed.
pub const NA: &str = "NA";

/// Shortest representation that parses back to the same float.
pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_owned(), num)
}

/// An in-memory table rendered as CSV or as aligned text.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(varred_core::Error::from)?;
        for row in &self.rows {
            w.write_record(row).map_err(varred_core::Error::from)?;
        }
        w.into_inner()
            .map_err(|e| CliError::Core(varred_core::Error::Io(e.into_error())))
    }

    /// Text rendering; numbers are shortened to 4 decimals.
    pub fn to_text(&self) -> String {
        let cell = |s: &str| match s.parse::<f64>() {
            Ok(v) if s.contains('.') || s.contains('e') => format!("{v:.4}"),
            _ => s.to_owned(),
        };
        let rows: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(|c| cell(c)).collect()).collect();
        let widths: Vec<usize> = (0..self.header.len())
            .map(|j| {
                rows.iter()
                    .map(|r| r[j].chars().count())
                    .chain([self.header[j].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_owned()
        };
        let mut out = line(&self.header);
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(varred_core::Error::from)?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(varred_core::Error::from)?;
    tmp.write_all(bytes).map_err(varred_core::Error::from)?;
    tmp.persist(path)
        .map_err(|e| CliError::Core(varred_core::Error::Io(e.error)))?;
    Ok(())
}

/// Collects the files a subcommand produces.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_owned(),
            written: Vec::new(),
        }
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        self.bytes(name, &table.to_csv()?)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.bytes(name, text.as_bytes())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
