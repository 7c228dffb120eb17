//! CSV ingestion and export, with a plain-text sidecar describing column
//! kinds (`name=numeric` or `name=categorical`, one per line).

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use assemblage_core::tabular::{ColumnKind, Dataset, Schema, Value};

/// Ingestion failures carry the 1-based line of the offending input so the
/// message points at something the user can open in an editor.
#[derive(Debug)]
pub enum IngestError {
    ParseError { line: u64, message: String },
    SchemaMismatch(String),
}

impl fmt::Display for IngestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestError::ParseError { line, message } => {
                write!(f, "line {line}: {message}")
            }
            IngestError::SchemaMismatch(message) => write!(f, "schema mismatch: {message}"),
        }
    }
}

impl std::error::Error for IngestError {}

/// Reads a sidecar file into a schema, preserving column order.
pub fn read_sidecar(path: &Path) -> Result<Schema> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading schema sidecar {}", path.display()))?;
    let mut columns = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let entry = raw.trim();
        if entry.is_empty() || entry.starts_with('#') {
            continue;
        }
        let (name, kind) = entry.split_once('=').ok_or_else(|| IngestError::ParseError {
            line,
            message: format!("expected `column=kind`, got {entry:?}"),
        })?;
        let kind = match kind.trim() {
            "numeric" => ColumnKind::Numeric,
            "categorical" => ColumnKind::Categorical,
            other => {
                return Err(IngestError::ParseError {
                    line,
                    message: format!("unknown column kind {other:?} (expected numeric or categorical)"),
                }
                .into())
            }
        };
        columns.push((name.trim().to_string(), kind));
    }
    Ok(Schema::new(columns).map_err(|e| IngestError::SchemaMismatch(e.to_string()))?)
}

/// Writes the sidecar for a schema, one `name=kind` line per column.
pub fn write_sidecar(schema: &Schema, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (name, kind) in schema.columns() {
        let kind = match kind {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Categorical => "categorical",
        };
        text.push_str(name);
        text.push('=');
        text.push_str(kind);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads a CSV whose header must match the schema's columns in order.
/// Numeric cells must parse as f64; categorical cells are taken verbatim
/// (after token canonicalization).
pub fn ingest_csv(path: &Path, schema: Arc<Schema>, id: &str, price: f64) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(file);

    let names: Vec<&str> = schema.columns().iter().map(|(n, _)| n.as_str()).collect();
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::ParseError { line: 1, message: e.to_string() })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header != names {
        return Err(IngestError::SchemaMismatch(format!(
            "{}: header {header:?} does not match schema columns {names:?}",
            path.display()
        ))
        .into());
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is line 1, so record i starts at line i + 2 unless the csv
        // reader knows better (multi-line quoted fields shift positions).
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line()))
            .unwrap_or(i as u64 + 2);
        let record = record.map_err(|e| IngestError::ParseError { line, message: e.to_string() })?;
        if record.len() != names.len() {
            return Err(IngestError::ParseError {
                line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            }
            .into());
        }
        let mut row = Vec::with_capacity(names.len());
        for ((name, kind), field) in schema.columns().iter().zip(record.iter()) {
            match kind {
                ColumnKind::Numeric => {
                    let value: f64 = field.trim().parse().map_err(|_| IngestError::ParseError {
                        line,
                        message: format!("column {name}: expected a number, got {field:?}"),
                    })?;
                    row.push(Value::Num(value));
                }
                ColumnKind::Categorical => row.push(Value::cat(field)),
            }
        }
        rows.push(row);
    }

    Ok(Dataset::new(id, schema, rows, price).map_err(|e| IngestError::SchemaMismatch(e.to_string()))?)
}

/// Writes a dataset back out as CSV. Numbers use the shortest representation
/// that round-trips, so export followed by ingest reproduces the rows exactly.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    writer.write_record(dataset.schema.columns().iter().map(|(n, _)| n.as_str()))?;
    let mut fields = Vec::with_capacity(dataset.schema.columns().len());
    for row in &dataset.rows {
        fields.clear();
        for value in row {
            match value {
                Value::Num(x) => fields.push(x.to_string()),
                Value::Cat(token) => fields.push(token.to_string()),
            }
        }
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}
