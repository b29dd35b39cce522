//! Self-describing artifact formats.
//!
//! * CSV: a `# schema=<tag> config_hash=<hex>` comment line, then a header
//!   row and data rows. Floats use Rust's shortest round-trip formatting,
//!   so values read back are bit-identical.
//! * JSON: an object with `schema` and `config_hash` keys next to the body.
//! * JSON lines: the first line carries `schema`, `config_hash` and the full
//!   configuration; each further line is one record.
//! * Binary matrices: rows and columns as little-endian `u64`, followed by
//!   the row-major entries as little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn stale(path: &Path, reason: impl Into<String>) -> Error {
    Error::StaleInput { path: path.to_path_buf(), reason: reason.into() }
}

pub fn header_line(schema: &str, config_hash: &str) -> String {
    format!("# schema={schema} config_hash={config_hash}")
}

fn check_header(path: &Path, line: &str, schema: &str, config_hash: &str) -> Result<()> {
    let mut found_schema = None;
    let mut found_hash = None;
    for token in line.trim_start_matches('#').split_whitespace() {
        if let Some(v) = token.strip_prefix("schema=") {
            found_schema = Some(v);
        } else if let Some(v) = token.strip_prefix("config_hash=") {
            found_hash = Some(v);
        }
    }
    match (found_schema, found_hash) {
        (Some(s), _) if s != schema => Err(stale(path, format!("schema `{s}`, expected `{schema}`"))),
        (Some(_), Some(h)) if h != config_hash => {
            Err(stale(path, format!("written for configuration {h}, current is {config_hash}")))
        }
        (Some(_), Some(_)) => Ok(()),
        _ => Err(stale(path, "missing schema/config_hash header")),
    }
}

pub fn write_csv<I, R>(
    path: &Path,
    schema: &str,
    config_hash: &str,
    columns: &[&str],
    rows: I,
) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header_line(schema, config_hash))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidInput(format!("missing CSV column `{name}`")))
    }

    pub fn parse_f64(cell: &str) -> Result<f64> {
        cell.parse().map_err(|_| Error::InvalidInput(format!("not a number: `{cell}`")))
    }
}

pub fn read_csv(path: &Path, schema: &str, config_hash: &str) -> Result<CsvTable> {
    require(path)?;
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    check_header(path, &first, schema, config_hash)?;
    let mut r = csv::Reader::from_reader(reader);
    let columns = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(CsvTable { columns, rows })
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    config_hash: String,
    #[serde(flatten)]
    body: T,
}

pub fn write_json<T: Serialize>(path: &Path, schema: &str, config_hash: &str, body: &T) -> Result<()> {
    let env = Envelope { schema: schema.into(), config_hash: config_hash.into(), body };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str, config_hash: &str) -> Result<T> {
    require(path)?;
    let text = std::fs::read_to_string(path)?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text)?;
    if env.schema != schema {
        return Err(stale(path, format!("schema `{}`, expected `{schema}`", env.schema)));
    }
    if env.config_hash != config_hash {
        return Err(stale(
            path,
            format!("written for configuration {}, current is {config_hash}", env.config_hash),
        ));
    }
    Ok(serde_json::from_value(env.body)?)
}

pub fn write_jsonl<T: Serialize, C: Serialize>(
    path: &Path,
    schema: &str,
    config_hash: &str,
    config: &C,
    records: &[T],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let head = serde_json::json!({ "schema": schema, "config_hash": config_hash, "config": config });
    writeln!(out, "{}", serde_json::to_string(&head)?)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str, config_hash: &str) -> Result<Vec<T>> {
    require(path)?;
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| stale(path, "empty file"))??;
    let head: serde_json::Value = serde_json::from_str(&first)?;
    let s = head.get("schema").and_then(|v| v.as_str()).unwrap_or_default();
    let h = head.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
    check_header(path, &format!("schema={s} config_hash={h}"), schema, config_hash)?;
    lines
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    require(path)?;
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::InvalidInput(format!("{}: truncated header", path.display())));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(0) as usize, word(1) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::InvalidInput(format!(
            "{}: {rows}×{cols} header does not match {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let k = 16 + 8 * (i * cols + j);
        f64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes"))
    }))
}

pub fn write_matrix_csv(path: &Path, schema: &str, config_hash: &str, m: &DMatrix<f64>) -> Result<()> {
    let columns: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    write_csv(
        path,
        schema,
        config_hash,
        &cols,
        (0..m.nrows()).map(|i| (0..m.ncols()).map(move |j| m[(i, j)].to_string())),
    )
}

pub fn read_matrix_csv(path: &Path, schema: &str, config_hash: &str) -> Result<DMatrix<f64>> {
    let t = read_csv(path, schema, config_hash)?;
    let cols = t.columns.len();
    let mut data = Vec::with_capacity(t.rows.len() * cols);
    for row in &t.rows {
        if row.len() != cols {
            return Err(Error::InvalidInput(format!("{}: ragged row", path.display())));
        }
        for cell in row {
            data.push(CsvTable::parse_f64(cell)?);
        }
    }
    Ok(DMatrix::from_row_slice(t.rows.len(), cols, &data))
}
