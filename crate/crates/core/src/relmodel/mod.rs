//! Relational database model: schema manifest, typed row store, schema graph
//! and relational entity graph.

mod graph;
mod manifest;
mod store;

pub use graph::{
    build_entity_graph, build_entity_graph_with, build_schema_graph, read_graph, validate_graph,
    write_graph, Direction, EntityGraph, GraphOptions, GraphReport, NodeBlock, Relation,
    SchemaEdge, SchemaGraph,
};
pub use manifest::{
    parse_schema_manifest, ColumnKind, ColumnSpec, ForeignKey, Link, SchemaManifest, TableSpec,
};
pub use store::{
    format_date, load_tables, load_tables_with, parse_date, Day, LoadOptions, RowStore, TableData,
    Value,
};

use std::path::Path;

use crate::error::Result;

/// A database loaded from its schema manifest, with its entity graph.
#[derive(Debug, Clone)]
pub struct Database {
    pub manifest: SchemaManifest,
    pub store: RowStore,
    pub graph: EntityGraph,
}

/// Loads the manifest at `schema`, the CSVs next to it, and builds the graph.
pub fn open_database(schema: &Path, load: LoadOptions, graph: GraphOptions) -> Result<Database> {
    let manifest = parse_schema_manifest(schema)?;
    let root = schema.parent().unwrap_or_else(|| Path::new("."));
    let store = load_tables_with(&manifest, root, load)?;
    let graph = build_entity_graph_with(&manifest, &store, graph)?;
    Ok(Database {
        manifest,
        store,
        graph,
    })
}
