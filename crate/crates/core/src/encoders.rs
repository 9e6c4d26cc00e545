//! Initial node features: a sign-hash featurizer over linearized rows, REMB
//! embedding files, and a uniform random baseline matched to a reference range.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::relmodel::{RowStore, SchemaManifest};
use crate::rng::{hash_str, rng_for};
use crate::rowtext::linearize_by_index;

pub const DEFAULT_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub table: String,
    pub rows: usize,
    /// Row-major `rows × dim`.
    pub data: Vec<f32>,
}

impl EmbeddingBlock {
    pub fn row(&self, i: usize, dim: usize) -> &[f32] {
        &self.data[i * dim..(i + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub blocks: Vec<EmbeddingBlock>,
}

impl EmbeddingMatrix {
    pub fn block(&self, table: &str) -> Option<&EmbeddingBlock> {
        self.blocks.iter().find(|b| b.table == table)
    }

    pub fn shapes(&self) -> Vec<(String, usize)> {
        self.blocks
            .iter()
            .map(|b| (b.table.clone(), b.rows))
            .collect()
    }

    /// Checks table names, order and row counts against an expected layout.
    pub fn check_shapes(&self, expected: &[(String, usize)]) -> Result<()> {
        if self.blocks.len() != expected.len() {
            return Err(Error::Format(format!(
                "table count mismatch: features have {}, database has {}",
                self.blocks.len(),
                expected.len()
            )));
        }
        for (b, (name, rows)) in self.blocks.iter().zip(expected) {
            if &b.table != name {
                return Err(Error::Format(format!(
                    "table name mismatch: features have '{}', database has '{name}'",
                    b.table
                )));
            }
            if b.rows != *rows {
                return Err(Error::Format(format!(
                    "row count mismatch for '{name}': features have {}, database has {rows}",
                    b.rows
                )));
            }
        }
        Ok(())
    }

    pub fn value_range(&self) -> Option<(f32, f32)> {
        self.blocks
            .iter()
            .flat_map(|b| b.data.iter().copied())
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMethod {
    Hashed,
    File,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub method: EncoderMethod,
    pub dim: usize,
    pub seed: u64,
    pub source: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dim must be > 0"));
        }
        match self.method {
            EncoderMethod::File if self.source.is_none() => {
                Err(Error::invalid("file encoder needs a source path"))
            }
            EncoderMethod::Random if self.reference.is_none() => {
                Err(Error::invalid("random encoder needs a reference path"))
            }
            _ => Ok(()),
        }
    }
}

/// Sign-hash bag of whitespace tokens, scaled by 1/√(token count).
pub fn hash_text(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut v = vec![0f32; dim];
    let mut count = 0usize;
    for tok in text.split_whitespace() {
        let h = hash_str(seed, tok);
        let bucket = (h % dim as u64) as usize;
        // top bit is independent of the low bits used for the bucket
        v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        count += 1;
    }
    if count > 0 {
        let scale = 1.0 / (count as f32).sqrt();
        v.iter_mut().for_each(|x| *x *= scale);
    }
    v
}

pub fn encode_hashed(
    manifest: &SchemaManifest,
    store: &RowStore,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::invalid("embedding dim must be > 0"));
    }
    let blocks = manifest
        .tables
        .iter()
        .enumerate()
        .map(|(ti, spec)| {
            let rows = store.row_count(ti);
            let data = (0..rows)
                .into_par_iter()
                .map(|i| {
                    linearize_by_index(manifest, store, ti, i)
                        .map(|r| hash_text(&r.text, dim, seed))
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            Ok(EmbeddingBlock {
                table: spec.name.clone(),
                rows,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingMatrix { dim, blocks })
}

/// Uniform draws from [min, max] of the reference, over all blocks.
pub fn gen_random_embeddings(reference: &EmbeddingMatrix, seed: u64) -> Result<EmbeddingMatrix> {
    let (lo, hi) = reference
        .value_range()
        .ok_or_else(|| Error::invalid("random baseline needs a non-empty reference"))?;
    let blocks = reference
        .blocks
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let mut rng = rng_for(seed, &[0xe4b, bi as u64]);
            let data = (0..b.data.len())
                .map(|_| {
                    if lo == hi {
                        lo
                    } else {
                        let u: f64 = rng.random();
                        let v = f64::from(lo) + (f64::from(hi) - f64::from(lo)) * u;
                        (v as f32).clamp(lo, hi)
                    }
                })
                .collect();
            EmbeddingBlock {
                table: b.table.clone(),
                rows: b.rows,
                data,
            }
        })
        .collect();
    Ok(EmbeddingMatrix {
        dim: reference.dim,
        blocks,
    })
}

const REMB_MAGIC: &[u8; 4] = b"REMB";

pub fn write_embedding_file(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = LeWriter::new(BufWriter::new(file));
    (|| -> std::io::Result<()> {
        w.bytes(REMB_MAGIC)?;
        w.u8(1)?;
        w.u8(4)?;
        w.u16(0)?;
        w.u32(m.dim as u32)?;
        w.u32(m.blocks.len() as u32)?;
        for b in &m.blocks {
            w.name(&b.table)?;
            w.u64(b.rows as u64)?;
        }
        for b in &m.blocks {
            for &v in &b.data {
                w.f32(v)?;
            }
        }
        w.into_inner().flush()
    })()
    .map_err(io)
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = LeReader::new(BufReader::new(file));
    if &r.array::<4>()? != REMB_MAGIC {
        return Err(Error::Format("magic mismatch: not a REMB file".into()));
    }
    let version = r.u8()?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported REMB version {version}")));
    }
    let width = r.u8()?;
    if width != 4 {
        return Err(Error::Format(format!("unsupported float width {width}")));
    }
    let _reserved = r.u16()?;
    let dim = r.u32()? as usize;
    let n_tables = r.u32()? as usize;
    let mut headers = Vec::with_capacity(n_tables);
    for _ in 0..n_tables {
        let name = r.name()?;
        let rows = r.u64()? as usize;
        headers.push((name, rows));
    }
    let mut blocks = Vec::with_capacity(n_tables);
    for (table, rows) in headers {
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("block size overflows".into()))?;
        let data = r.f32s(n)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value in table '{table}' at row {}",
                pos / dim.max(1)
            )));
        }
        blocks.push(EmbeddingBlock { table, rows, data });
    }
    r.expect_end()?;
    Ok(EmbeddingMatrix { dim, blocks })
}

/// Loads a REMB file and checks it against the database layout.
pub fn load_embedding_file(path: &Path, expected: &[(String, usize)]) -> Result<EmbeddingMatrix> {
    let m = read_embedding_file(path)?;
    m.check_shapes(expected)?;
    Ok(m)
}
