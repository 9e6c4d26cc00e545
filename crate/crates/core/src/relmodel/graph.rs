use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::manifest::SchemaManifest;
use super::store::{Day, RowStore, Value};
use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Foreign-key holder → referenced row.
    Forward,
    /// Referenced row → foreign-key holder.
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaEdge {
    pub source: usize,
    pub column: String,
    pub target: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaGraph {
    pub tables: Vec<String>,
    pub edges: Vec<SchemaEdge>,
}

/// Table-level graph with one forward and one inverse edge per link.
pub fn build_schema_graph(manifest: &SchemaManifest) -> SchemaGraph {
    let mut edges = Vec::new();
    for link in manifest.links() {
        let column = manifest.tables[link.from_table].columns[link.column]
            .name
            .clone();
        edges.push(SchemaEdge {
            source: link.from_table,
            column: column.clone(),
            target: link.to_table,
            direction: Direction::Forward,
        });
        edges.push(SchemaEdge {
            source: link.to_table,
            column,
            target: link.from_table,
            direction: Direction::Inverse,
        });
    }
    SchemaGraph {
        tables: manifest.tables.iter().map(|t| t.name.clone()).collect(),
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeBlock {
    pub table: String,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub src_table: usize,
    pub dst_table: usize,
    pub column: String,
    pub direction: Direction,
    /// Index of the reverse relation in `EntityGraph::relations`.
    pub inverse: usize,
    /// (source ordinal, target ordinal), per-table ordinals, sorted and unique.
    pub edges: Vec<(u32, u32)>,
}

/// Relational entity graph. Nodes are rows; node ids are global, assigned
/// block by block in manifest table order and CSV row order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EntityGraph {
    pub blocks: Vec<NodeBlock>,
    pub relations: Vec<Relation>,
    pub timestamps: Vec<Option<Day>>,
    /// Foreign-key cells that did not resolve to a row of the target table.
    pub dangling: usize,
}

impl EntityGraph {
    pub fn num_nodes(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.count)
    }

    pub fn num_edges(&self) -> usize {
        self.relations.iter().map(|r| r.edges.len()).sum()
    }

    pub fn table_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.table.clone()).collect()
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.table == name)
    }

    /// φ: global node id → table index.
    pub fn node_type(&self, node: usize) -> usize {
        debug_assert!(node < self.num_nodes());
        self.blocks.partition_point(|b| b.offset + b.count <= node)
    }

    pub fn global(&self, table: usize, ordinal: usize) -> usize {
        self.blocks[table].offset + ordinal
    }

    /// (table, ordinal) for a global node id.
    pub fn local(&self, node: usize) -> (usize, usize) {
        let t = self.node_type(node);
        (t, node - self.blocks[t].offset)
    }

    pub fn shapes(&self) -> Vec<(String, usize)> {
        self.blocks
            .iter()
            .map(|b| (b.table.clone(), b.count))
            .collect()
    }

    /// Debug dump: `EDGE <relation> <src_table>:<src_ordinal> <dst_table>:<dst_ordinal>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in &self.relations {
            let (s, d) = (
                &self.blocks[r.src_table].table,
                &self.blocks[r.dst_table].table,
            );
            for &(u, v) in &r.edges {
                let _ = writeln!(out, "EDGE {} {s}:{u} {d}:{v}", r.name);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GraphOptions {
    /// Fail on unresolvable foreign keys instead of dropping the edge.
    pub strict: bool,
}

pub fn build_entity_graph(manifest: &SchemaManifest, store: &RowStore) -> Result<EntityGraph> {
    build_entity_graph_with(manifest, store, GraphOptions::default())
}

pub fn build_entity_graph_with(
    manifest: &SchemaManifest,
    store: &RowStore,
    opts: GraphOptions,
) -> Result<EntityGraph> {
    if store.tables.len() != manifest.tables.len() {
        return Err(Error::invalid("row store does not match manifest"));
    }
    let mut blocks = Vec::with_capacity(manifest.tables.len());
    let mut timestamps = Vec::with_capacity(store.total_rows());
    let mut offset = 0;
    for (spec, data) in manifest.tables.iter().zip(&store.tables) {
        blocks.push(NodeBlock {
            table: spec.name.clone(),
            offset,
            count: data.len(),
        });
        offset += data.len();
        match &data.timestamps {
            Some(ts) => timestamps.extend(ts.iter().copied()),
            None => timestamps.extend(std::iter::repeat_n(None, data.len())),
        }
    }

    let mut relations = Vec::new();
    let mut dangling = 0;
    for link in manifest.links() {
        let src = &manifest.tables[link.from_table];
        let dst = &manifest.tables[link.to_table];
        let column = src.columns[link.column].name.clone();
        let target_index = &store.tables[link.to_table].pk_index;
        let mut edges = Vec::new();
        for (ordinal, row) in store.tables[link.from_table].rows.iter().enumerate() {
            let key = match &row[link.column] {
                Value::Absent => continue,
                v => v.to_string(),
            };
            match target_index.get(&key) {
                Some(&target) => edges.push((ordinal as u32, target as u32)),
                None if opts.strict => {
                    return Err(Error::invalid(format!(
                        "{}.{} row {ordinal}: key '{key}' not found in {}",
                        src.name, column, dst.name
                    )))
                }
                None => dangling += 1,
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut reverse: Vec<(u32, u32)> = edges.iter().map(|&(u, v)| (v, u)).collect();
        reverse.sort_unstable();

        let forward_idx = relations.len();
        relations.push(Relation {
            name: format!("{}.{}->{}", src.name, column, dst.name),
            src_table: link.from_table,
            dst_table: link.to_table,
            column: column.clone(),
            direction: Direction::Forward,
            inverse: forward_idx + 1,
            edges,
        });
        relations.push(Relation {
            name: format!("{}<-{}.{}", dst.name, src.name, column),
            src_table: link.to_table,
            dst_table: link.from_table,
            column,
            direction: Direction::Inverse,
            inverse: forward_idx,
            edges: reverse,
        });
    }
    if dangling > 0 {
        log::warn!("{dangling} foreign-key values did not resolve; edges dropped");
    }
    Ok(EntityGraph {
        blocks,
        relations,
        timestamps,
        dangling,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphReport {
    pub edge_counts: Vec<(String, usize)>,
    pub parity_ok: bool,
    pub violations: Vec<String>,
}

impl GraphReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<GraphReport> {
        if self.is_ok() {
            Ok(self)
        } else {
            Err(Error::InvalidGraph(self.violations))
        }
    }
}

/// Checks block partitioning, endpoint ranges, duplicate edges and reverse-edge parity.
pub fn validate_graph(g: &EntityGraph) -> GraphReport {
    let mut violations = Vec::new();
    let mut expected_offset = 0;
    for b in &g.blocks {
        if b.offset != expected_offset {
            violations.push(format!(
                "block {} starts at {} (expected {expected_offset})",
                b.table, b.offset
            ));
        }
        expected_offset = b.offset + b.count;
    }
    if g.timestamps.len() != g.num_nodes() {
        violations.push(format!(
            "timestamp vector has {} entries for {} nodes",
            g.timestamps.len(),
            g.num_nodes()
        ));
    }

    let mut parity_ok = true;
    for (ri, r) in g.relations.iter().enumerate() {
        let (ns, nd) = match (g.blocks.get(r.src_table), g.blocks.get(r.dst_table)) {
            (Some(s), Some(d)) => (s.count as u32, d.count as u32),
            _ => {
                violations.push(format!("relation {} references an unknown table", r.name));
                continue;
            }
        };
        let mut seen = HashSet::with_capacity(r.edges.len());
        for &(u, v) in &r.edges {
            if u >= ns || v >= nd {
                violations.push(format!("relation {}: edge ({u},{v}) out of range", r.name));
            }
            if !seen.insert((u, v)) {
                violations.push(format!("relation {}: duplicate edge ({u},{v})", r.name));
            }
        }
        let Some(inv) = g.relations.get(r.inverse) else {
            violations.push(format!("relation {} has no inverse", r.name));
            parity_ok = false;
            continue;
        };
        if inv.inverse != ri || inv.src_table != r.dst_table || inv.dst_table != r.src_table {
            violations.push(format!(
                "relation {} and {} are not mutual inverses",
                r.name, inv.name
            ));
            parity_ok = false;
            continue;
        }
        let reverse: HashSet<(u32, u32)> = inv.edges.iter().map(|&(a, b)| (b, a)).collect();
        for &(u, v) in &r.edges {
            if !reverse.contains(&(u, v)) {
                parity_ok = false;
                violations.push(format!(
                    "parity: edge ({u},{v}) in {} has no reverse in {}",
                    r.name, inv.name
                ));
            }
        }
    }
    GraphReport {
        edge_counts: g
            .relations
            .iter()
            .map(|r| (r.name.clone(), r.edges.len()))
            .collect(),
        parity_ok,
        violations,
    }
}

const GRAPH_MAGIC: &[u8; 4] = b"RGPH";
const NO_TIME: i32 = i32::MIN;

/// Binary graph file: magic `RGPH`, u8 version=1, u32 n_tables, per table
/// (name, u64 count), u8 has_time, per node i32 day (i32::MIN = none),
/// u32 n_relations, per relation (name, column, u32 src, u32 dst,
/// u8 direction, u32 inverse, u64 n_edges, n_edges × (u32, u32)), u64 dangling.
pub fn write_graph(g: &EntityGraph, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = LeWriter::new(BufWriter::new(file));
    (|| -> std::io::Result<()> {
        w.bytes(GRAPH_MAGIC)?;
        w.u8(1)?;
        w.u32(g.blocks.len() as u32)?;
        for b in &g.blocks {
            w.name(&b.table)?;
            w.u64(b.count as u64)?;
        }
        let has_time = g.timestamps.iter().any(Option::is_some);
        w.u8(u8::from(has_time))?;
        if has_time {
            for t in &g.timestamps {
                w.i32(t.unwrap_or(NO_TIME))?;
            }
        }
        w.u32(g.relations.len() as u32)?;
        for r in &g.relations {
            w.name(&r.name)?;
            w.name(&r.column)?;
            w.u32(r.src_table as u32)?;
            w.u32(r.dst_table as u32)?;
            w.u8(match r.direction {
                Direction::Forward => 0,
                Direction::Inverse => 1,
            })?;
            w.u32(r.inverse as u32)?;
            w.u64(r.edges.len() as u64)?;
            for &(u, v) in &r.edges {
                w.u32(u)?;
                w.u32(v)?;
            }
        }
        w.u64(g.dangling as u64)?;
        w.into_inner().flush()
    })()
    .map_err(io)
}

pub fn read_graph(path: &Path) -> Result<EntityGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = LeReader::new(BufReader::new(file));
    if &r.array::<4>()? != GRAPH_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a graph file (magic mismatch)",
            path.display()
        )));
    }
    if r.u8()? != 1 {
        return Err(Error::Format("unsupported graph file version".into()));
    }
    let n_tables = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_tables);
    let mut offset = 0;
    for _ in 0..n_tables {
        let table = r.name()?;
        let count = r.u64()? as usize;
        blocks.push(NodeBlock {
            table,
            offset,
            count,
        });
        offset += count;
    }
    let timestamps = if r.u8()? == 1 {
        (0..offset)
            .map(|_| r.i32().map(|d| (d != NO_TIME).then_some(d)))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; offset]
    };
    let n_rel = r.u32()? as usize;
    let mut relations = Vec::with_capacity(n_rel);
    for _ in 0..n_rel {
        let name = r.name()?;
        let column = r.name()?;
        let src_table = r.u32()? as usize;
        let dst_table = r.u32()? as usize;
        let direction = match r.u8()? {
            0 => Direction::Forward,
            1 => Direction::Inverse,
            d => return Err(Error::Format(format!("bad relation direction {d}"))),
        };
        let inverse = r.u32()? as usize;
        let n = r.u64()? as usize;
        let edges = (0..n)
            .map(|_| Ok((r.u32()?, r.u32()?)))
            .collect::<Result<Vec<_>>>()?;
        relations.push(Relation {
            name,
            src_table,
            dst_table,
            column,
            direction,
            inverse,
            edges,
        });
    }
    let dangling = r.u64()? as usize;
    r.expect_end()?;
    let g = EntityGraph {
        blocks,
        relations,
        timestamps,
        dangling,
    };
    validate_graph(&g).into_result()?;
    Ok(g)
}
