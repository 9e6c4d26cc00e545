//! Deterministic synthetic relational databases with a planted label signal.
//!
//! Table `t0` holds the entities. Every other table has a foreign key (to `t0`
//! in a star, to its predecessor in a chain), a `tag` column and categorical
//! attributes. Each row has a latent topic that drives its attribute words;
//! children usually inherit their parent's topic.
//!
//! In neighbor-aggregate mode every entity has a hidden propensity, and rows
//! linking directly to it are tagged `marker` with that propensity. An
//! entity's label at a seed time is the majority tag among its linked rows
//! created up to then. In node-local mode the entity carries the tag itself.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::downstream::{TaskManifest, TaskRow, TaskTable, TimeSplit};
use crate::error::{Error, Result};
use crate::relmodel::{
    format_date, parse_date, ColumnKind, ColumnSpec, Day, ForeignKey, SchemaManifest, TableSpec,
};
use crate::rng::{rng_for, Rng};

pub const MARKER: &str = "marker";
pub const PLAIN: &str = "plain";
const TOPIC_KEEP: f64 = 0.7;
const ATTR_FIDELITY: f64 = 0.7;
const PROPENSITY: [f64; 2] = [0.2, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Star,
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    NodeLocal,
    NeighborAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthProfile {
    pub tables: usize,
    /// Rows per non-entity table.
    pub rows: usize,
    /// Rows of the entity table; defaults to `rows`.
    pub entity_rows: Option<usize>,
    pub topology: Topology,
    pub attributes: usize,
    pub vocab: usize,
    pub topics: usize,
    pub signal: SignalMode,
    pub noise: f64,
    /// Seed times per split; the task has three times this many.
    pub checkpoints_per_split: usize,
    pub span_days: i32,
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            tables: 4,
            rows: 2000,
            entity_rows: None,
            topology: Topology::Star,
            attributes: 2,
            vocab: 500,
            topics: 16,
            signal: SignalMode::NeighborAggregate,
            noise: 0.1,
            checkpoints_per_split: 2,
            span_days: 1000,
            seed: 0,
        }
    }
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.tables < 2 {
            problems.push("at least 2 tables are needed".to_string());
        }
        if self.rows == 0 || self.entity_rows == Some(0) {
            problems.push("tables need rows".into());
        }
        if self.vocab == 0 || self.topics == 0 {
            problems.push("vocab and topics must be positive".into());
        }
        if !(0.0..0.5).contains(&self.noise) {
            problems.push(format!("noise {} not in [0, 0.5)", self.noise));
        }
        if self.checkpoints_per_split == 0 {
            problems.push("checkpoints_per_split must be positive".into());
        }
        if self.span_days < 10 {
            problems.push("span_days must be at least 10".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entity_rows.unwrap_or(self.rows)
    }

    fn parent_of(&self, table: usize) -> Option<usize> {
        match (table, self.topology) {
            (0, _) => None,
            (_, Topology::Star) => Some(0),
            (t, Topology::Chain) => Some(t - 1),
        }
    }
}

pub fn table_name(i: usize) -> String {
    format!("t{i}")
}

/// A generated database held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatabase {
    pub manifest: SchemaManifest,
    /// (file name, CSV text) per table, in manifest order.
    pub files: Vec<(String, String)>,
    pub task: TaskTable,
    pub task_manifest: TaskManifest,
    /// Labels decided by a fair coin (ties or no visible linked rows).
    pub coin_flips: usize,
}

pub const SCHEMA_FILE: &str = "schema.json";
pub const TASK_FILE: &str = "task.csv";
pub const TASK_MANIFEST_FILE: &str = "task.json";

impl SynthDatabase {
    /// Writes the schema, table CSVs, task file and task manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put(SCHEMA_FILE, &self.manifest.to_json_string())?;
        for (name, text) in &self.files {
            put(name, text)?;
        }
        put(TASK_FILE, &self.task.to_csv())?;
        put(TASK_MANIFEST_FILE, &self.task_manifest.to_json_string())?;
        Ok(dir.join(SCHEMA_FILE))
    }
}

struct Row {
    key: String,
    created: Day,
    parent: Option<usize>,
    topic: usize,
    tag: Option<bool>,
    words: Vec<usize>,
}

fn topic_word(profile: &SynthProfile, table: usize, attr: usize, topic: usize) -> usize {
    let slot = (topic * profile.attributes + attr) as u64;
    ((slot.wrapping_mul(7919) + table as u64 * 104_729) % profile.vocab as u64) as usize
}

fn draw_words(profile: &SynthProfile, table: usize, topic: usize, rng: &mut Rng) -> Vec<usize> {
    (0..profile.attributes)
        .map(|a| {
            if rng.random::<f64>() < ATTR_FIDELITY {
                topic_word(profile, table, a, topic)
            } else {
                rng.random_range(0..profile.vocab)
            }
        })
        .collect()
}

/// Generates tables and the labeled task for `profile`.
pub fn generate_database(profile: &SynthProfile) -> Result<SynthDatabase> {
    profile.validate()?;
    let mut rng = rng_for(profile.seed, &[0x5e7a]);
    let day0 = parse_date("2020-01-01").expect("valid literal");
    let span = profile.span_days;
    let node_local = profile.signal == SignalMode::NodeLocal;

    let n_entities = profile.entity_count();
    let propensity: Vec<f64> = (0..n_entities)
        .map(|_| PROPENSITY[rng.random_range(0..2)])
        .collect();
    let mut tables: Vec<Vec<Row>> = Vec::with_capacity(profile.tables);
    for t in 0..profile.tables {
        let n = if t == 0 { n_entities } else { profile.rows };
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let created = if t == 0 {
                day0 + (i as i64 * (span as i64 / 10) / n as i64) as Day
            } else {
                day0 + (i as i64 * span as i64 / n as i64) as Day
            };
            let parent = profile
                .parent_of(t)
                .map(|p| rng.random_range(0..tables[p].len()));
            let topic = match parent {
                Some(p) if rng.random::<f64>() < TOPIC_KEEP => {
                    tables[profile.parent_of(t).unwrap()][p].topic
                }
                _ => rng.random_range(0..profile.topics),
            };
            let tag = match (t, parent) {
                (0, _) => node_local.then(|| rng.random::<f64>() < 0.5),
                (_, Some(p)) if profile.parent_of(t) == Some(0) && !node_local => {
                    Some(rng.random::<f64>() < propensity[p])
                }
                _ => Some(rng.random::<f64>() < 0.5),
            };
            let words = draw_words(profile, t, topic, &mut rng);
            rows.push(Row {
                key: format!("{}-{i}", table_name(t)),
                created,
                parent,
                topic,
                tag,
                words,
            });
        }
        tables.push(rows);
    }

    let mut specs = Vec::with_capacity(profile.tables);
    let mut files = Vec::with_capacity(profile.tables);
    for (t, rows) in tables.iter().enumerate() {
        let name = table_name(t);
        let file = format!("{name}.csv");
        let col = |n: &str, kind: ColumnKind, nullable: bool| ColumnSpec {
            name: n.to_string(),
            kind,
            nullable,
        };
        let mut columns = vec![
            col("id", ColumnKind::Key, false),
            col("created", ColumnKind::Date, false),
        ];
        let mut foreign_keys = Vec::new();
        let parent = profile.parent_of(t).map(table_name);
        if let Some(p) = &parent {
            let c = format!("{p}_id");
            columns.push(col(&c, ColumnKind::Key, false));
            foreign_keys.push(ForeignKey {
                column: c,
                references: p.clone(),
            });
        }
        for a in 1..=profile.attributes {
            columns.push(col(&format!("attr_{a}"), ColumnKind::Text, true));
        }
        let has_tag = rows.first().is_some_and(|r| r.tag.is_some());
        if has_tag {
            columns.push(col("tag", ColumnKind::Text, true));
        }
        let mut csv = String::new();
        let header: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        csv.push_str(&header.join(","));
        csv.push('\n');
        for r in rows {
            let _ = write!(csv, "{},{}", r.key, format_date(r.created));
            if let (Some(p), Some(pi)) = (&parent, r.parent) {
                let _ = write!(csv, ",{p}-{pi}");
            }
            for w in &r.words {
                let _ = write!(csv, ",w{w}");
            }
            if let Some(tag) = r.tag {
                csv.push(',');
                csv.push_str(if tag { MARKER } else { PLAIN });
            }
            csv.push('\n');
        }
        specs.push(TableSpec {
            name: name.clone(),
            file: PathBuf::from(&file),
            primary_key: "id".into(),
            columns,
            foreign_keys,
            time_column: Some("created".into()),
        });
        files.push((file, csv));
    }
    let manifest = SchemaManifest { tables: specs };
    manifest.validate()?;

    // seed times: `checkpoints_per_split` each for train, val and test, spread
    // over the second half of the timeline
    let k = profile.checkpoints_per_split;
    let total = 3 * k;
    let checkpoints: Vec<Day> = (0..total)
        .map(|c| day0 + span / 2 + ((c + 1) as i64 * (span as i64 / 2) / total as i64) as Day)
        .collect();
    // entities are split disjointly across train (1/2), val (1/4) and test (1/4)
    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    let mut group = vec![0usize; n_entities];
    for (pos, &e) in order.iter().enumerate() {
        group[e] = match pos * 4 / n_entities.max(1) {
            0 | 1 => 0,
            2 => 1,
            _ => 2,
        };
    }
    let mut children: Vec<Vec<(Day, bool)>> = vec![Vec::new(); n_entities];
    for (t, rows) in tables.iter().enumerate().skip(1) {
        if profile.parent_of(t) != Some(0) {
            continue;
        }
        for r in rows {
            if let (Some(p), Some(tag)) = (r.parent, r.tag) {
                children[p].push((r.created, tag));
            }
        }
    }
    let mut label_rng = rng_for(profile.seed, &[0x1abe1]);
    let mut task_rows = Vec::new();
    let mut coin_flips = 0;
    for (g, times) in checkpoints.chunks(k).enumerate() {
        for &time in times {
            for e in (0..n_entities).filter(|&e| group[e] == g) {
                let base = if node_local {
                    tables[0][e].tag.expect("entity tag in node-local mode")
                } else {
                    let visible = children[e].iter().filter(|(c, _)| *c <= time);
                    let (marked, n) =
                        visible.fold((0, 0), |(m, n), &(_, tag)| (m + tag as usize, n + 1));
                    match (2 * marked).cmp(&n) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Less => false,
                        std::cmp::Ordering::Equal => {
                            coin_flips += 1;
                            label_rng.random::<bool>()
                        }
                    }
                };
                let flip = label_rng.random::<f64>() < profile.noise;
                task_rows.push(TaskRow {
                    entity: e,
                    key: tables[0][e].key.clone(),
                    time,
                    label: (base ^ flip) as u8,
                });
            }
        }
    }
    let task = TaskTable {
        entity_table: table_name(0),
        rows: task_rows,
    };
    let task_manifest = TaskManifest {
        entity_table: table_name(0),
        time_split: TimeSplit {
            val_start: checkpoints[k],
            test_start: checkpoints[2 * k],
        },
    };
    Ok(SynthDatabase {
        manifest,
        files,
        task,
        task_manifest,
        coin_flips,
    })
}
