use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relmodel::{format_date, parse_date, Day, RowStore, SchemaManifest};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRow {
    /// Ordinal of the entity row within its table.
    pub entity: usize,
    pub key: String,
    pub time: Day,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTable {
    pub entity_table: String,
    pub rows: Vec<TaskRow>,
}

impl TaskTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.rows[i].label).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("entity_id,timestamp,label\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.key, format_date(r.time), r.label));
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    entity_id: String,
    timestamp: String,
    label: String,
}

/// Reads `entity_id,timestamp,label` and resolves every id in `entity_table`.
pub fn load_task_table(
    path: &Path,
    manifest: &SchemaManifest,
    store: &RowStore,
    entity_table: &str,
) -> Result<TaskTable> {
    let err = |message: String| Error::Table {
        file: path.to_path_buf(),
        message,
    };
    let ti = manifest
        .table_index(entity_table)
        .ok_or_else(|| err(format!("entity table '{entity_table}' not in schema")))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["entity_id", "timestamp", "label"] {
        return Err(err("header must be entity_id,timestamp,label".into()));
    }
    let pk = &store.tables[ti].pk_index;
    let mut rows = Vec::new();
    for (k, rec) in reader.deserialize::<RawRow>().enumerate() {
        let n = k + 1;
        let rec = rec.map_err(|e| err(format!("row {n}: {e}")))?;
        let entity = *pk.get(&rec.entity_id).ok_or_else(|| {
            err(format!(
                "row {n}: unknown entity id '{}' in '{entity_table}'",
                rec.entity_id
            ))
        })?;
        let time = parse_date(&rec.timestamp)
            .ok_or_else(|| err(format!("row {n}: unparseable date '{}'", rec.timestamp)))?;
        let label = match rec.label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("row {n}: label '{other}' is not 0 or 1"))),
        };
        rows.push(TaskRow {
            entity,
            key: rec.entity_id,
            time,
            label,
        });
    }
    Ok(TaskTable {
        entity_table: entity_table.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSplit {
    #[serde(with = "date_str")]
    pub val_start: Day,
    #[serde(with = "date_str")]
    pub test_start: Day,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub entity_table: String,
    pub time_split: TimeSplit,
}

impl TaskManifest {
    pub fn from_json_str(raw: &str) -> Result<Self> {
        let m: TaskManifest =
            serde_json::from_str(raw).map_err(|e| Error::invalid(format!("task manifest: {e}")))?;
        if m.time_split.val_start > m.time_split.test_start {
            return Err(Error::invalid(
                "task manifest: val_start is after test_start",
            ));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&raw)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

mod date_str {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use crate::relmodel::{format_date, parse_date, Day};

    pub fn serialize<S: Serializer>(d: &Day, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_date(*d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Day, D::Error> {
        let raw = String::deserialize(d)?;
        parse_date(&raw).ok_or_else(|| de::Error::custom(format!("invalid date '{raw}'")))
    }
}

/// Row indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// `time < val_start` trains, `time < test_start` validates, the rest tests.
    pub fn temporal(task: &TaskTable, split: &TimeSplit) -> Self {
        let mut s = Splits::default();
        for (i, r) in task.rows.iter().enumerate() {
            if r.time < split.val_start {
                s.train.push(i);
            } else if r.time < split.test_start {
                s.val.push(i);
            } else {
                s.test.push(i);
            }
        }
        s
    }

    /// Shuffled 70/15/15 split.
    pub fn random(task: &TaskTable, seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..task.len()).collect();
        ids.shuffle(&mut rng_for(seed, &[0x7a5c]));
        let n_train = task.len() * 7 / 10;
        let n_val = task.len() * 15 / 100;
        Splits {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}
