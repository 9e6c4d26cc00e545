use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;

use super::manifest::{ColumnKind, SchemaManifest, TableSpec};
use crate::error::{Error, Result};

/// Days since 1970-01-01.
pub type Day = i32;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

/// Parses a strict `YYYY-MM-DD` date.
pub fn parse_date(raw: &str) -> Option<Day> {
    let raw = raw.trim();
    if raw.len() != 10 {
        return None;
    }
    let d = NaiveDate::parse_from_str(raw, "%Y-%m-%d").ok()?;
    i32::try_from((d - epoch()).num_days()).ok()
}

pub fn format_date(day: Day) -> String {
    (epoch() + chrono::Duration::days(i64::from(day)))
        .format("%Y-%m-%d")
        .to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Absent,
    Text(String),
    Integer(i64),
    Float(f64),
    Date(Day),
    Key(String),
}

impl Value {
    pub fn is_absent(&self) -> bool {
        matches!(self, Value::Absent)
    }

    fn parse(kind: ColumnKind, raw: &str) -> std::result::Result<Value, ()> {
        if raw.is_empty() {
            return Ok(Value::Absent);
        }
        match kind {
            ColumnKind::Text => Ok(Value::Text(raw.to_string())),
            ColumnKind::Key => Ok(Value::Key(raw.trim().to_string())),
            ColumnKind::Integer => raw.trim().parse().map(Value::Integer).map_err(|_| ()),
            ColumnKind::Float => match raw.trim().parse::<f64>() {
                Ok(v) if v.is_nan() => Ok(Value::Absent),
                Ok(v) if v.is_finite() => Ok(Value::Float(v)),
                _ => Err(()),
            },
            ColumnKind::Date => parse_date(raw).map(Value::Date).ok_or(()),
        }
    }
}

/// Canonical text rendering: integers without a decimal point, floats in
/// shortest round-trip form, dates as ISO `YYYY-MM-DD`, absent as "".
impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Absent => Ok(()),
            Value::Text(s) | Value::Key(s) => f.write_str(s),
            Value::Integer(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Date(d) => f.write_str(&format_date(*d)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TableData {
    pub rows: Vec<Vec<Value>>,
    pub pk_index: HashMap<String, usize>,
    pub timestamps: Option<Vec<Option<Day>>>,
    /// Typed cells that failed to parse and were stored as absent.
    pub parse_warnings: usize,
    /// Absent cells in columns declared non-nullable.
    pub null_warnings: usize,
}

impl TableData {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RowStore {
    pub tables: Vec<TableData>,
}

impl RowStore {
    pub fn row_count(&self, table: usize) -> usize {
        self.tables[table].len()
    }

    pub fn total_rows(&self) -> usize {
        self.tables.iter().map(TableData::len).sum()
    }

    pub fn warnings(&self) -> usize {
        self.tables.iter().map(|t| t.parse_warnings).sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Keep only the first N rows of each table, in file order.
    pub row_cap: Option<usize>,
}

pub fn load_tables(manifest: &SchemaManifest, root: &Path) -> Result<RowStore> {
    load_tables_with(manifest, root, LoadOptions::default())
}

pub fn load_tables_with(
    manifest: &SchemaManifest,
    root: &Path,
    opts: LoadOptions,
) -> Result<RowStore> {
    let tables = manifest
        .tables
        .iter()
        .map(|t| load_table(t, &root.join(&t.file), opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(RowStore { tables })
}

fn load_table(spec: &TableSpec, path: &Path, opts: LoadOptions) -> Result<TableData> {
    let table_err = |message: String| Error::Table {
        file: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| table_err(format!("cannot read header: {e}")))?
        .clone();

    // position in the CSV record for each manifest column
    let mut positions = Vec::with_capacity(spec.columns.len());
    for col in &spec.columns {
        let pos = header
            .iter()
            .position(|h| h == col.name)
            .ok_or_else(|| table_err(format!("header mismatch: column '{}' missing", col.name)))?;
        positions.push(pos);
    }
    if header.len() != spec.columns.len() {
        let extra: Vec<_> = header
            .iter()
            .filter(|h| spec.column_index(h).is_none())
            .collect();
        return Err(table_err(format!(
            "header mismatch: unexpected columns {extra:?}"
        )));
    }

    let pk = spec.pk_index();
    let time = spec.time_index();
    let mut data = TableData {
        timestamps: time.map(|_| Vec::new()),
        ..TableData::default()
    };
    for (line, record) in reader.records().enumerate() {
        if opts.row_cap.is_some_and(|cap| data.rows.len() >= cap) {
            break;
        }
        let record = record.map_err(|e| table_err(format!("row {}: {e}", line + 2)))?;
        let mut row = Vec::with_capacity(spec.columns.len());
        for (col, &pos) in spec.columns.iter().zip(&positions) {
            let raw = record.get(pos).unwrap_or("");
            let value = Value::parse(col.kind, raw).unwrap_or_else(|()| {
                data.parse_warnings += 1;
                Value::Absent
            });
            if value.is_absent() && !col.nullable {
                data.null_warnings += 1;
            }
            row.push(value);
        }
        let key = match &row[pk] {
            Value::Absent => {
                return Err(table_err(format!("row {}: missing primary key", line + 2)))
            }
            v => v.to_string(),
        };
        let ordinal = data.rows.len();
        if data.pk_index.insert(key.clone(), ordinal).is_some() {
            return Err(table_err(format!(
                "row {}: duplicate primary key '{key}'",
                line + 2
            )));
        }
        if let (Some(ts), Some(ti)) = (data.timestamps.as_mut(), time) {
            ts.push(match row[ti] {
                Value::Date(d) => Some(d),
                _ => None,
            });
        }
        data.rows.push(row);
    }
    if data.parse_warnings > 0 {
        log::warn!(
            "{}: {} unparseable cells stored as absent",
            spec.name,
            data.parse_warnings
        );
    }
    Ok(data)
}
