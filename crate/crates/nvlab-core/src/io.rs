//! Artifact I/O: schema-tagged CSV files that survive bit-exact round
//! trips, plus hashing and JSON helpers for run reports.
//!
//! Every CSV starts with `# schema=<name> version=1`, followed by a header
//! row of `name[unit]` columns. Floats are written with 17 significant
//! digits so re-reading reproduces the original bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Current version stamped into every CSV artifact.
pub const CSV_VERSION: u32 = 1;

/// One column of an artifact table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvColumn {
    /// Header in `name[unit]` form, e.g. `f[Hz]`. Unitless columns use
    /// `name[-]`.
    pub header: String,
    pub data: CsvData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CsvData {
    Floats(Vec<f64>),
    /// Written as 0/1 so numeric ingestion keeps working.
    Bools(Vec<bool>),
    Labels(Vec<String>),
}

impl CsvData {
    pub fn len(&self) -> usize {
        match self {
            CsvData::Floats(v) => v.len(),
            CsvData::Bools(v) => v.len(),
            CsvData::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CsvColumn {
    pub fn floats(header: &str, values: Vec<f64>) -> Self {
        CsvColumn { header: header.to_string(), data: CsvData::Floats(values) }
    }

    pub fn bools(header: &str, values: Vec<bool>) -> Self {
        CsvColumn { header: header.to_string(), data: CsvData::Bools(values) }
    }

    pub fn labels(header: &str, values: Vec<String>) -> Self {
        CsvColumn { header: header.to_string(), data: CsvData::Labels(values) }
    }
}

/// Format a float with enough digits to round-trip exactly.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Render a schema-tagged CSV into a string.
pub fn render_csv(schema: &str, columns: &[CsvColumn]) -> Result<String> {
    if columns.is_empty() {
        return Err(Error::invalid("csv needs at least one column".to_string()));
    }
    let rows = columns[0].data.len();
    for c in columns {
        if c.data.len() != rows {
            return Err(Error::invalid(format!(
                "column {} has {} rows, expected {rows}",
                c.header,
                c.data.len()
            )));
        }
        if c.header.contains(',') || c.header.contains('\n') {
            return Err(Error::invalid(format!(
                "column header {:?} contains a separator",
                c.header
            )));
        }
    }
    let mut out = String::new();
    writeln!(out, "# schema={schema} version={CSV_VERSION}").unwrap();
    let headers: Vec<&str> = columns.iter().map(|c| c.header.as_str()).collect();
    writeln!(out, "{}", headers.join(",")).unwrap();
    for i in 0..rows {
        let mut first = true;
        for c in columns {
            if !first {
                out.push(',');
            }
            first = false;
            match &c.data {
                CsvData::Floats(v) => {
                    if !v[i].is_finite() {
                        return Err(Error::invalid(format!(
                            "non-finite value in column {} row {i}",
                            c.header
                        )));
                    }
                    write!(out, "{}", format_float(v[i])).unwrap();
                }
                CsvData::Bools(v) => write!(out, "{}", u8::from(v[i])).unwrap(),
                CsvData::Labels(v) => {
                    if v[i].contains(',') || v[i].contains('\n') {
                        return Err(Error::invalid(format!(
                            "label {:?} in column {} contains a separator",
                            v[i], c.header
                        )));
                    }
                    out.push_str(&v[i]);
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Write a schema-tagged CSV to disk.
pub fn write_csv(path: &Path, schema: &str, columns: &[CsvColumn]) -> Result<()> {
    let body = render_csv(schema, columns)?;
    fs::write(path, body)?;
    Ok(())
}

/// A CSV read back from disk, cells kept as raw strings until a typed
/// column is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvFile {
    pub schema: String,
    pub version: u32,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub path: String,
}

impl CsvFile {
    /// Index of a column by bare name (`tau` matches `tau[s]`) or by the
    /// full `name[unit]` header.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| {
            h == name || h.split('[').next().map(str::trim) == Some(name)
        })
    }

    /// Extract a column as floats, reporting the file line of the first
    /// cell that fails to parse. Bool columns (0/1) parse as floats too.
    pub fn float_column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name).ok_or_else(|| Error::MalformedCsv {
            path: self.path.clone(),
            line: 2,
            msg: format!(
                "no column named {name:?}; available: {}",
                self.headers.join(", ")
            ),
        })?;
        let mut out = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let cell = &row[idx];
            let v: f64 = cell.trim().parse().map_err(|_| Error::MalformedCsv {
                path: self.path.clone(),
                // +3: one schema line, one header line, 1-based numbering.
                line: i + 3,
                msg: format!("cell {cell:?} in column {name:?} is not a number"),
            })?;
            out.push(v);
        }
        Ok(out)
    }
}

/// Read a schema-tagged CSV, validating structure as it goes. Errors name
/// the offending line.
pub fn read_csv(path: &Path) -> Result<CsvFile> {
    let path_str = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, msg: String| Error::MalformedCsv {
        path: path_str.clone(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let schema_line = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".to_string()))?;
    let rest = schema_line
        .strip_prefix("# schema=")
        .ok_or_else(|| bad(1, format!("expected `# schema=<name> version=<n>`, got {schema_line:?}")))?;
    let mut parts = rest.split_whitespace();
    let schema = parts
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad(1, "missing schema name".to_string()))?
        .to_string();
    let version_part = parts
        .next()
        .and_then(|p| p.strip_prefix("version="))
        .ok_or_else(|| bad(1, "missing version tag".to_string()))?;
    let version: u32 = version_part
        .parse()
        .map_err(|_| bad(1, format!("version {version_part:?} is not an integer")))?;
    if parts.next().is_some() {
        return Err(bad(1, "unexpected extra tokens on schema line".to_string()));
    }

    let header_line = lines
        .next()
        .ok_or_else(|| bad(2, "missing header row".to_string()))?;
    let headers: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    if headers.iter().any(String::is_empty) {
        return Err(bad(2, "empty column name in header row".to_string()));
    }

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            return Err(bad(lineno, "unexpected comment line in data section".to_string()));
        }
        let cells: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if cells.len() != headers.len() {
            return Err(bad(
                lineno,
                format!("{} cells, expected {}", cells.len(), headers.len()),
            ));
        }
        rows.push(cells);
    }
    Ok(CsvFile { schema, version, headers, rows, path: path_str })
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

/// Serialize a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("json serialization failed: {e}")))?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}
