//! Row linearization into `<table> T <attr> A <value> V …` sequences,
//! semantic-unit masking, and train/validation/test corpus export.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::relmodel::{RowStore, SchemaManifest};
use crate::rng::{rng_for, Rng};

pub const TABLE_TOKEN: &str = "<table>";
pub const ATTR_TOKEN: &str = "<attr>";
pub const VALUE_TOKEN: &str = "<value>";
pub const MASK_TOKEN: &str = "<mask>";

const SPECIAL: [&str; 4] = [TABLE_TOKEN, ATTR_TOKEN, VALUE_TOKEN, MASK_TOKEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitKind {
    TableName,
    AttrName,
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub kind: UnitKind,
    pub text: String,
}

/// Unit 0 is the table name; column k contributes units `1 + 2k` (name) and `2 + 2k` (value).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedRow {
    pub table: String,
    pub units: Vec<Unit>,
    pub text: String,
}

/// Doubles the leading `<` of any special token occurring inside a value.
pub fn escape_value(raw: &str) -> String {
    let mut out = raw.to_string();
    if SPECIAL.iter().any(|t| out.contains(t)) {
        for t in SPECIAL {
            out = out.replace(t, &format!("<{t}"));
        }
    }
    out
}

pub fn unescape_value(escaped: &str) -> String {
    let mut out = escaped.to_string();
    for t in SPECIAL {
        out = out.replace(&format!("<{t}"), t);
    }
    out
}

fn render(units: &[Unit], replace: &BTreeSet<usize>) -> String {
    let piece = |i: usize| -> &str {
        if replace.contains(&i) {
            MASK_TOKEN
        } else {
            &units[i].text
        }
    };
    let mut s = String::new();
    s.push_str(TABLE_TOKEN);
    s.push(' ');
    s.push_str(piece(0));
    for k in (1..units.len()).step_by(2) {
        s.push(' ');
        s.push_str(ATTR_TOKEN);
        s.push(' ');
        s.push_str(piece(k));
        s.push(' ');
        s.push_str(VALUE_TOKEN);
        let v = piece(k + 1);
        if !v.is_empty() {
            s.push(' ');
            s.push_str(v);
        }
    }
    s
}

impl LinearizedRow {
    pub fn new(table: &str, cells: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut units = vec![Unit {
            kind: UnitKind::TableName,
            text: table.to_string(),
        }];
        for (attr, value) in cells {
            units.push(Unit {
                kind: UnitKind::AttrName,
                text: attr,
            });
            units.push(Unit {
                kind: UnitKind::Value,
                text: escape_value(&value),
            });
        }
        let text = render(&units, &BTreeSet::new());
        LinearizedRow {
            table: table.to_string(),
            units,
            text,
        }
    }

    /// Inverse of rendering: (table, [(attr, value)]) with values unescaped.
    pub fn parse(text: &str) -> Result<(String, Vec<(String, String)>)> {
        let body = text
            .strip_prefix("<table> ")
            .ok_or_else(|| Error::Format(format!("not a linearized row: {text:?}")))?;
        let mut pieces = body.split(" <attr> ");
        let table = pieces.next().unwrap_or_default().to_string();
        let mut cells = Vec::new();
        for piece in pieces {
            let (attr, rest) = piece
                .split_once(" <value>")
                .ok_or_else(|| Error::Format(format!("attribute without value in {text:?}")))?;
            let value = rest.strip_prefix(' ').unwrap_or(rest);
            cells.push((attr.to_string(), unescape_value(value)));
        }
        Ok((table, cells))
    }
}

pub fn linearize_row(
    manifest: &SchemaManifest,
    store: &RowStore,
    table: &str,
    ordinal: usize,
) -> Result<LinearizedRow> {
    let ti = manifest
        .table_index(table)
        .ok_or_else(|| Error::invalid(format!("unknown table '{table}'")))?;
    linearize_by_index(manifest, store, ti, ordinal)
}

pub fn linearize_by_index(
    manifest: &SchemaManifest,
    store: &RowStore,
    table: usize,
    ordinal: usize,
) -> Result<LinearizedRow> {
    let spec = &manifest.tables[table];
    let row = store.tables[table].rows.get(ordinal).ok_or_else(|| {
        Error::invalid(format!(
            "row ordinal {ordinal} out of range for table '{}' ({} rows)",
            spec.name,
            store.tables[table].len()
        ))
    })?;
    Ok(LinearizedRow::new(
        &spec.name,
        spec.columns
            .iter()
            .zip(row)
            .map(|(c, v)| (c.name.clone(), v.to_string())),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskProbs {
    pub table_name: f64,
    pub attr_name: f64,
    pub value: f64,
}

impl Default for MaskProbs {
    fn default() -> Self {
        MaskProbs {
            table_name: 0.30,
            attr_name: 0.20,
            value: 0.40,
        }
    }
}

impl MaskProbs {
    pub fn for_kind(&self, kind: UnitKind) -> f64 {
        match kind {
            UnitKind::TableName => self.table_name,
            UnitKind::AttrName => self.attr_name,
            UnitKind::Value => self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub row_id: usize,
    /// Units selected by the independent per-unit draws.
    pub drawn: BTreeSet<usize>,
    /// Unit added when no independent draw fired.
    pub forced: Option<usize>,
    /// Category of every unit in the row.
    pub categories: Vec<UnitKind>,
}

impl MaskPlan {
    pub fn masked(&self) -> BTreeSet<usize> {
        let mut m = self.drawn.clone();
        m.extend(self.forced);
        m
    }
}

/// Empty values and categories with probability 0 are never candidates.
pub fn maskable_units(row: &LinearizedRow, probs: &MaskProbs) -> Vec<usize> {
    row.units
        .iter()
        .enumerate()
        .filter(|(_, u)| !u.text.is_empty() && probs.for_kind(u.kind) > 0.0)
        .map(|(i, _)| i)
        .collect()
}

pub fn sample_mask_plan(
    row: &LinearizedRow,
    row_id: usize,
    probs: &MaskProbs,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let candidates = maskable_units(row, probs);
    if candidates.is_empty() {
        return Err(Error::invalid(format!(
            "unmaskable row {row_id} in table '{}'",
            row.table
        )));
    }
    let drawn: BTreeSet<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| rng.random::<f64>() < probs.for_kind(row.units[i].kind))
        .collect();
    let forced = if drawn.is_empty() {
        Some(*candidates.choose(rng).expect("non-empty"))
    } else {
        None
    };
    Ok(MaskPlan {
        row_id,
        drawn,
        forced,
        categories: row.units.iter().map(|u| u.kind).collect(),
    })
}

/// Returns (masked text, target text).
pub fn apply_mask(row: &LinearizedRow, plan: &MaskPlan) -> Result<(String, String)> {
    let masked = plan.masked();
    if masked.is_empty() {
        return Err(Error::invalid("mask plan masks no unit"));
    }
    if let Some(&bad) = masked.iter().find(|&&i| i >= row.units.len()) {
        return Err(Error::invalid(format!(
            "mask index {bad} out of range for row with {} units",
            row.units.len()
        )));
    }
    Ok((render(&row.units, &masked), row.text.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffled split with sizes (⌊0.7n⌋, ⌊0.1n⌋, remainder).
pub fn split_corpus(n_rows: usize, seed: u64) -> CorpusSplit {
    let mut ids: Vec<usize> = (0..n_rows).collect();
    ids.shuffle(&mut rng_for(seed, &[0x5b1_17]));
    let n_train = n_rows * 7 / 10;
    let n_valid = n_rows / 10;
    let test = ids.split_off(n_train + n_valid);
    let valid = ids.split_off(n_train);
    CorpusSplit {
        train: ids,
        valid,
        test,
        seed,
    }
}

/// One plan per row, each from a generator keyed by (seed, row id).
pub fn static_mask_plans(
    rows: &[LinearizedRow],
    probs: &MaskProbs,
    seed: u64,
) -> Result<Vec<MaskPlan>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| sample_mask_plan(r, i, probs, &mut rng_for(seed, &[0x3a5c, i as u64])))
        .collect()
}

/// Writes `train.txt`, `valid.masked.txt`, `valid.target.txt`,
/// `test.masked.txt`, `test.target.txt`. Train lines are targets only.
pub fn export_corpus(
    rows: &[LinearizedRow],
    plans: &[MaskPlan],
    split: &CorpusSplit,
    out: &Path,
) -> Result<()> {
    if plans.len() != rows.len() {
        return Err(Error::invalid(format!(
            "{} mask plans for {} rows",
            plans.len(),
            rows.len()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let open = |name: &str| -> Result<(BufWriter<File>, std::path::PathBuf)> {
        let p = out.join(name);
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((BufWriter::new(f), p))
    };
    let write_line = |w: &mut (BufWriter<File>, std::path::PathBuf), s: &str| -> Result<()> {
        writeln!(w.0, "{s}").map_err(|e| Error::io(&w.1, e))
    };

    let mut train = open("train.txt")?;
    for &i in &split.train {
        write_line(&mut train, &rows[i].text)?;
    }
    for (ids, stem) in [(&split.valid, "valid"), (&split.test, "test")] {
        let mut masked = open(&format!("{stem}.masked.txt"))?;
        let mut target = open(&format!("{stem}.target.txt"))?;
        for &i in ids.iter() {
            let (m, t) = apply_mask(&rows[i], &plans[i])?;
            write_line(&mut masked, &m)?;
            write_line(&mut target, &t)?;
        }
        for w in [&mut masked, &mut target] {
            w.0.flush().map_err(|e| Error::io(&w.1, e))?;
        }
    }
    train.0.flush().map_err(|e| Error::io(&train.1, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(cells: &[(&str, &str)]) -> LinearizedRow {
        LinearizedRow::new(
            "drivers",
            cells.iter().map(|(a, v)| (a.to_string(), v.to_string())),
        )
    }

    #[test]
    fn template_rendering() {
        let r = row(&[("driverId", "1"), ("surname", "Hamilton")]);
        assert_eq!(
            r.text,
            "<table> drivers <attr> driverId <value> 1 <attr> surname <value> Hamilton"
        );
        let r = row(&[("driverId", "1"), ("surname", "")]);
        assert_eq!(
            r.text,
            "<table> drivers <attr> driverId <value> 1 <attr> surname <value>"
        );
        assert_eq!(LinearizedRow::new("t", Vec::new()).text, "<table> t");
    }

    #[test]
    fn mask_application() {
        let r = row(&[("driverId", "1"), ("surname", "Hamilton")]);
        let plan = MaskPlan {
            row_id: 0,
            drawn: [4].into(),
            forced: None,
            categories: r.units.iter().map(|u| u.kind).collect(),
        };
        let (m, t) = apply_mask(&r, &plan).unwrap();
        assert_eq!(
            m,
            "<table> drivers <attr> driverId <value> 1 <attr> surname <value> <mask>"
        );
        assert_eq!(t, r.text);

        let plan = MaskPlan {
            drawn: [0].into(),
            ..plan
        };
        assert!(apply_mask(&r, &plan)
            .unwrap()
            .0
            .starts_with("<table> <mask> <attr> driverId"));

        let empty = MaskPlan {
            drawn: BTreeSet::new(),
            ..plan.clone()
        };
        assert!(apply_mask(&r, &empty).is_err());
        let oob = MaskPlan {
            drawn: [9].into(),
            ..plan
        };
        assert!(apply_mask(&r, &oob).is_err());
    }

    #[test]
    fn mask_plans_are_seeded_and_nonempty() {
        let r = row(&[("a", "x"), ("b", "y")]);
        let probs = MaskProbs::default();
        let p1 = sample_mask_plan(&r, 0, &probs, &mut rng_for(42, &[])).unwrap();
        let p2 = sample_mask_plan(&r, 0, &probs, &mut rng_for(42, &[])).unwrap();
        assert_eq!(p1, p2);
        let mut rng = rng_for(1, &[]);
        for _ in 0..1000 {
            let p = sample_mask_plan(&r, 0, &probs, &mut rng).unwrap();
            assert!(!p.masked().is_empty());
            assert_eq!(p.forced.is_some(), p.drawn.is_empty());
        }
    }

    #[test]
    fn empty_values_never_masked() {
        let r = row(&[("a", ""), ("b", "y")]);
        let mut rng = rng_for(3, &[]);
        for _ in 0..500 {
            let p = sample_mask_plan(&r, 0, &MaskProbs::default(), &mut rng).unwrap();
            assert!(!p.masked().contains(&2));
        }
        let names_off = MaskProbs {
            table_name: 0.0,
            attr_name: 0.0,
            value: 0.4,
        };
        let blank = row(&[("a", ""), ("b", "")]);
        let err = sample_mask_plan(&blank, 5, &names_off, &mut rng).unwrap_err();
        assert!(err.to_string().contains("unmaskable row"));
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(100, 0);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (70, 10, 20));
        let s = split_corpus(7, 0);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (4, 0, 3));
        let s = split_corpus(0, 0);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (0, 0, 0));
        let mut all: Vec<usize> = split_corpus(53, 9).train;
        let s = split_corpus(53, 9);
        all.extend(s.valid);
        all.extend(s.test);
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
    }

    fn export(rows: &[LinearizedRow], seed: u64, dir: &Path) {
        let plans = static_mask_plans(rows, &MaskProbs::default(), seed).unwrap();
        export_corpus(rows, &plans, &split_corpus(rows.len(), seed), dir).unwrap();
    }

    #[test]
    fn export_line_counts_and_stability() {
        let rows: Vec<_> = (0..10)
            .map(|i| row(&[("id", &i.to_string()), ("name", "x y")]))
            .collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        export(&rows, 1, a.path());
        export(&rows, 1, b.path());
        let files = [
            "train.txt",
            "valid.masked.txt",
            "valid.target.txt",
            "test.masked.txt",
            "test.target.txt",
        ];
        let counts: Vec<usize> = files
            .iter()
            .map(|f| {
                std::fs::read_to_string(a.path().join(f))
                    .unwrap()
                    .lines()
                    .count()
            })
            .collect();
        assert_eq!(counts, vec![7, 1, 1, 2, 2]);
        for f in files {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let empty = tempfile::tempdir().unwrap();
        export(&[], 1, empty.path());
        assert!(std::fs::read(empty.path().join("train.txt"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn escaped_special_tokens_survive() {
        let r = row(&[("note", "a <attr> b"), ("x", "<mask>")]);
        assert!(!r.text.contains(" <attr> b"));
        let (_, cells) = LinearizedRow::parse(&r.text).unwrap();
        assert_eq!(cells[0].1, "a <attr> b");
        assert_eq!(cells[1].1, "<mask>");
    }

    proptest! {
        #[test]
        fn parse_inverts_render(
            table in "[a-z_]{1,8}",
            cells in prop::collection::vec(("[a-zA-Z_][a-zA-Z0-9_]{0,6}", "[^\n<]{0,12}"), 0..6),
        ) {
            let r = LinearizedRow::new(&table, cells.clone());
            let (t, parsed) = LinearizedRow::parse(&r.text).unwrap();
            prop_assert_eq!(t, table);
            prop_assert_eq!(parsed, cells);
        }
    }
}
