#![allow(dead_code)]

use std::path::Path;

use relfm::downstream::{load_task_table, Splits, TaskContext, TaskManifest, TaskTable};
use relfm::encoders::{encode_hashed, gen_random_embeddings, EmbeddingMatrix};
use relfm::hetgnn::NeighborIndex;
use relfm::relmodel::{open_database, Database, GraphOptions, LoadOptions};
use relfm::synth::{generate_database, SynthProfile, TASK_FILE, TASK_MANIFEST_FILE};

/// A synthetic database written to disk and loaded back through the normal path.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub db: Database,
    pub index: NeighborIndex,
    pub features: EmbeddingMatrix,
    pub task: TaskTable,
    pub splits: Splits,
    pub coin_flips: usize,
}

impl Fixture {
    pub fn new(profile: &SynthProfile, dim: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let synth = generate_database(profile).unwrap();
        let schema = synth.write(dir.path()).unwrap();
        Self::load(dir, &schema, dim, synth.coin_flips)
    }

    fn load(dir: tempfile::TempDir, schema: &Path, dim: usize, coin_flips: usize) -> Self {
        let db = open_database(
            schema,
            LoadOptions::default(),
            GraphOptions { strict: true },
        )
        .unwrap();
        let index = NeighborIndex::build(&db.graph);
        let features = encode_hashed(&db.manifest, &db.store, dim, 0).unwrap();
        let tm = TaskManifest::load(&dir.path().join(TASK_MANIFEST_FILE)).unwrap();
        let task = load_task_table(
            &dir.path().join(TASK_FILE),
            &db.manifest,
            &db.store,
            &tm.entity_table,
        )
        .unwrap();
        let splits = Splits::temporal(&task, &tm.time_split);
        Fixture {
            dir,
            db,
            index,
            features,
            task,
            splits,
            coin_flips,
        }
    }

    pub fn random_features(&self, seed: u64) -> EmbeddingMatrix {
        gen_random_embeddings(&self.features, seed).unwrap()
    }

    pub fn ctx<'a>(&'a self, features: &'a EmbeddingMatrix) -> TaskContext<'a> {
        TaskContext {
            graph: &self.db.graph,
            index: &self.index,
            features,
            task: &self.task,
            splits: &self.splits,
        }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
