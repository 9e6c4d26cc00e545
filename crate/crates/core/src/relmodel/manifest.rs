use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Text,
    Integer,
    Float,
    Date,
    Key,
}

impl ColumnKind {
    fn parse(raw: &str) -> Option<Self> {
        Some(match raw {
            "text" => ColumnKind::Text,
            "integer" => ColumnKind::Integer,
            "float" => ColumnKind::Float,
            "date" => ColumnKind::Date,
            "key" => ColumnKind::Key,
            _ => return None,
        })
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ColumnKind::Text => "text",
            ColumnKind::Integer => "integer",
            ColumnKind::Float => "float",
            ColumnKind::Date => "date",
            ColumnKind::Key => "key",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForeignKey {
    pub column: String,
    pub references: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TableSpec {
    pub name: String,
    pub file: PathBuf,
    pub primary_key: String,
    pub columns: Vec<ColumnSpec>,
    pub foreign_keys: Vec<ForeignKey>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_column: Option<String>,
}

impl TableSpec {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn pk_index(&self) -> usize {
        self.column_index(&self.primary_key)
            .expect("validated manifest has its primary key column")
    }

    pub fn time_index(&self) -> Option<usize> {
        self.time_column
            .as_deref()
            .and_then(|c| self.column_index(c))
    }
}

/// A link `(T_fkey, T_pkey)` together with the column that carries it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub from_table: usize,
    pub column: usize,
    pub to_table: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SchemaManifest {
    pub tables: Vec<TableSpec>,
}

// Raw serde mirror; keys that may legally be arrays in other tools are kept
// as JSON values so composite keys get a targeted error instead of a type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    tables: Vec<RawTable>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    name: String,
    file: PathBuf,
    primary_key: serde_json::Value,
    columns: Vec<RawColumn>,
    #[serde(default)]
    foreign_keys: Vec<RawForeignKey>,
    #[serde(default)]
    time_column: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumn {
    name: String,
    kind: String,
    #[serde(default = "default_nullable")]
    nullable: bool,
}

fn default_nullable() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawForeignKey {
    column: serde_json::Value,
    references: String,
}

fn single_key(value: &serde_json::Value, context: &str) -> Result<String> {
    match value {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(_) => {
            Err(Error::schema(context, "composite keys are not supported"))
        }
        other => Err(Error::schema(
            context,
            format!("expected a column name, found {other}"),
        )),
    }
}

impl SchemaManifest {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::ManifestSyntax {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut tables = Vec::with_capacity(raw.tables.len());
        for t in raw.tables {
            let mut columns = Vec::with_capacity(t.columns.len());
            for c in t.columns {
                let kind = ColumnKind::parse(&c.kind).ok_or_else(|| {
                    Error::schema(
                        format!("table '{}', column '{}'", t.name, c.name),
                        format!("unknown column kind '{}'", c.kind),
                    )
                })?;
                columns.push(ColumnSpec {
                    name: c.name,
                    kind,
                    nullable: c.nullable,
                });
            }
            let primary_key =
                single_key(&t.primary_key, &format!("table '{}' primary_key", t.name))?;
            let mut foreign_keys = Vec::with_capacity(t.foreign_keys.len());
            for fk in t.foreign_keys {
                let column = single_key(&fk.column, &format!("table '{}' foreign_keys", t.name))?;
                foreign_keys.push(ForeignKey {
                    column,
                    references: fk.references,
                });
            }
            tables.push(TableSpec {
                name: t.name,
                file: t.file,
                primary_key,
                columns,
                foreign_keys,
                time_column: t.time_column,
            });
        }
        let manifest = SchemaManifest { tables };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(Error::schema(
                    format!("table '{}'", t.name),
                    "duplicate table name",
                ));
            }
        }
        for t in &self.tables {
            let ctx = |col: &str| format!("table '{}', column '{}'", t.name, col);
            let mut cols = HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.as_str()) {
                    return Err(Error::schema(ctx(&c.name), "duplicate column name"));
                }
            }
            if t.column_index(&t.primary_key).is_none() {
                return Err(Error::schema(
                    ctx(&t.primary_key),
                    "primary key column not found",
                ));
            }
            for fk in &t.foreign_keys {
                if t.column_index(&fk.column).is_none() {
                    return Err(Error::schema(
                        ctx(&fk.column),
                        "foreign-key column not found",
                    ));
                }
                if !names.contains(fk.references.as_str()) {
                    return Err(Error::schema(
                        ctx(&fk.column),
                        format!("referenced table not found: '{}'", fk.references),
                    ));
                }
            }
            if let Some(tc) = &t.time_column {
                match t.column_index(tc) {
                    None => return Err(Error::schema(ctx(tc), "time column not found")),
                    Some(i) if t.columns[i].kind != ColumnKind::Date => {
                        return Err(Error::schema(ctx(tc), "time column must have kind 'date'"))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// The link set, in table order then foreign-key order.
    pub fn links(&self) -> Vec<Link> {
        let mut out = Vec::new();
        for (ti, t) in self.tables.iter().enumerate() {
            for fk in &t.foreign_keys {
                out.push(Link {
                    from_table: ti,
                    column: t.column_index(&fk.column).expect("validated"),
                    to_table: self.table_index(&fk.references).expect("validated"),
                });
            }
        }
        out
    }
}

pub fn parse_schema_manifest(path: &Path) -> Result<SchemaManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SchemaManifest::from_json_str(&text, path)
}
