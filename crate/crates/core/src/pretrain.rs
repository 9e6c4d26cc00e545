//! Masked feature reconstruction pretraining of the shared GNN over one or
//! more databases.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::hetgnn::{
    decode_reconstruction, forward, gather_features, init_params, sample_neighborhood, FanoutSpec,
    ModelConfig, NeighborIndex, SampledSubgraph,
};
use crate::relmodel::EntityGraph;
use crate::rng::{rng_for, Rng};
use crate::tensor::{loss, AdamConfig, AdamState, ParamStore, Scalar, Tape, Tensor, Var};

const STREAM_SPLIT: u64 = 0x51;
const STREAM_SHUFFLE: u64 = 0x52;
const STREAM_SAMPLE: u64 = 0x53;
const STREAM_MASK: u64 = 0x54;
/// Epoch tag used for the static validation masks and samples.
const VAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub fanout: FanoutSpec,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden_channels: usize,
    pub layers: usize,
    pub val_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_prob: 0.15,
            alpha: 0.7,
            gamma: 2.0,
            epsilon: 1e-6,
            fanout: FanoutSpec::default(),
            batch_size: 16384,
            lr: 1e-4,
            epochs: 20,
            seed: 0,
            hidden_channels: 256,
            layers: 2,
            val_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn from_json_str(raw: &str) -> Result<Self> {
        let cfg: PretrainConfig = serde_json::from_str(raw)
            .map_err(|e| Error::invalid(format!("pretraining config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            problems.push(format!("mask_prob {} not in (0, 1]", self.mask_prob));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha {} not in [0, 1]", self.alpha));
        }
        if !(self.gamma >= 1.0) {
            problems.push(format!("gamma {} < 1", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            problems.push(format!("val_fraction {} not in [0, 1)", self.val_fraction));
        }
        if self.fanout.len() != self.layers {
            problems.push(format!(
                "fanout has {} hops for {} layers",
                self.fanout.len(),
                self.layers
            ));
        }
        if self.hidden_channels == 0 {
            problems.push("hidden_channels must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        PretrainConfig::default().loss()
    }
}

/// One Bernoulli(p) draw per dimension; `true` marks a masked dimension.
pub fn draw_mask(d: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    (0..d).map(|_| rng.random::<f64>() < p).collect()
}

/// Masks each entry of `x` independently with probability `p` and zeroes it.
pub fn mask_features<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!(
            "mask probability {p} not in (0, 1]"
        )));
    }
    let mask = draw_mask(x.numel(), p, rng);
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .for_each(|(v, _)| *v = T::zero());
    Ok((out, mask))
}

pub fn scaled_cosine_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    gamma: f64,
    eps: f64,
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "scaled_cosine_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let (v, _) = loss::scaled_cosine(
        pred.data(),
        target.data(),
        mask,
        pred.cols(),
        gamma,
        eps,
        false,
    )?;
    Ok(v.as_f64())
}

pub fn masked_mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "masked_mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let (v, _) = loss::masked_mse(pred.data(), target.data(), mask, pred.cols(), false)?;
    Ok(v.as_f64())
}

/// `α·ℒ_cos + (1 − α)·ℒ_mse`.
pub fn combined_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<f64> {
    let cos = scaled_cosine_loss(pred, target, mask, cfg.gamma, cfg.epsilon)?;
    let mse = masked_mse_loss(pred, target, mask)?;
    Ok(cfg.alpha * cos + (1.0 - cfg.alpha) * mse)
}

pub struct BatchLoss {
    pub combined: Var,
    pub cos: Var,
    pub mse: Var,
    pub prediction: Var,
}

/// Forward, decode and score one batch. `x` holds the (already masked) input
/// rows of every subgraph node; `target` and `mask` cover the seeds.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    tables: &[String],
    sub: &SampledSubgraph,
    x: Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let xv = tape.constant(x);
    let h = forward(tape, params, tables, sub, xv)?;
    let prediction = decode_reconstruction(tape, params, h)?;
    let cos = tape.scaled_cosine_loss(prediction, target, mask, cfg.gamma, cfg.epsilon)?;
    let mse = tape.masked_mse_loss(prediction, target, mask)?;
    let alpha = T::lit(cfg.alpha);
    let combined = tape.weighted_sum(&[(cos, alpha), (mse, T::one() - alpha)])?;
    Ok(BatchLoss {
        combined,
        cos,
        mse,
        prediction,
    })
}

/// A database taking part in pretraining.
#[derive(Debug, Clone, Copy)]
pub struct PretrainSource<'a> {
    pub name: &'a str,
    pub graph: &'a EntityGraph,
    pub features: &'a EmbeddingMatrix,
}

/// Projection names for a source's tables; qualified by database when several
/// databases share one model.
pub fn type_names(source: &PretrainSource<'_>, qualify: bool) -> Vec<String> {
    source
        .graph
        .table_names()
        .into_iter()
        .map(|t| {
            if qualify {
                format!("{}.{t}", source.name)
            } else {
                t
            }
        })
        .collect()
}

/// Ordered (database, seed batch) pairs for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub batches: Vec<(usize, Vec<usize>)>,
}

impl BatchSchedule {
    /// Shuffles every database's seeds, cuts them into batches and interleaves
    /// the databases round-robin until all are exhausted.
    pub fn build(seeds: &[Vec<usize>], batch_size: usize, seed: u64, epoch: u64) -> Self {
        let per_db: Vec<Vec<Vec<usize>>> = seeds
            .iter()
            .enumerate()
            .map(|(db, s)| {
                let mut s = s.clone();
                s.shuffle(&mut rng_for(seed, &[STREAM_SHUFFLE, epoch, db as u64]));
                s.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let rounds = per_db.iter().map(Vec::len).max().unwrap_or(0);
        let mut batches = Vec::new();
        for r in 0..rounds {
            for (db, chunks) in per_db.iter().enumerate() {
                if let Some(c) = chunks.get(r) {
                    batches.push((db, c.clone()));
                }
            }
        }
        BatchSchedule { batches }
    }
}

/// Train/validation seed split per database.
pub fn split_seeds(
    sources: &[PretrainSource<'_>],
    val_fraction: f64,
    seed: u64,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (db, s) in sources.iter().enumerate() {
        let n = s.graph.num_nodes();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng_for(seed, &[STREAM_SPLIT, db as u64]));
        let mut k = (n as f64 * val_fraction).round() as usize;
        if val_fraction > 0.0 && n >= 2 {
            k = k.clamp(1, n - 1);
        }
        val.push(ids[..k].to_vec());
        train.push(ids[k..].to_vec());
    }
    (train, val)
}

struct PreparedBatch {
    db: usize,
    sub: SampledSubgraph,
    x: Tensor<f32>,
    target: Tensor<f32>,
    mask: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn prepare_batch(
    source: &PretrainSource<'_>,
    index: &NeighborIndex,
    db: usize,
    seeds: &[usize],
    fanout: &FanoutSpec,
    mask_prob: f64,
    seed: u64,
    epoch: u64,
    batch: u64,
) -> Result<PreparedBatch> {
    let mut rng = rng_for(seed, &[STREAM_SAMPLE, epoch, db as u64, batch]);
    let sub = sample_neighborhood(source.graph, index, seeds, fanout, &mut rng, None);
    let mut x: Tensor<f32> = gather_features(source.graph, source.features, &sub)?;
    let d = x.cols();
    let mut target = Vec::with_capacity(seeds.len() * d);
    let mut mask = Vec::with_capacity(seeds.len() * d);
    for (&node, &local) in seeds.iter().zip(&sub.seed_local) {
        let m = draw_mask(
            d,
            mask_prob,
            &mut rng_for(seed, &[STREAM_MASK, epoch, db as u64, node as u64]),
        );
        let row = &mut x.data_mut()[local * d..(local + 1) * d];
        target.extend_from_slice(row);
        row.iter_mut()
            .zip(&m)
            .filter(|(_, &mk)| mk)
            .for_each(|(v, _)| *v = 0.0);
        mask.extend(m);
    }
    Ok(PreparedBatch {
        db,
        target: Tensor::matrix(seeds.len(), d, target)?,
        sub,
        x,
        mask,
    })
}

fn counted_rows(mask: &[bool], d: usize) -> usize {
    mask.chunks_exact(d.max(1))
        .filter(|m| m.iter().any(|&b| b))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReconstructionReport {
    pub combined: f64,
    pub cos: f64,
    pub mse: f64,
    /// Masked squared error per masked dimension, averaged over nodes.
    pub mse_per_dim: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub combined: f64,
    pub cos: f64,
    pub mse: f64,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("epoch,split,loss_combined,loss_cos,loss_mse\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9}",
            r.epoch, r.split, r.combined, r.cos, r.mse
        );
    }
    out
}

pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ParamStore<f32>,
    pub tables: Vec<Vec<String>>,
    pub history: Vec<LossRecord>,
    pub best_epoch: usize,
    pub validation: ReconstructionReport,
    pub val_seeds: Vec<Vec<usize>>,
}

/// Held-out reconstruction quality with static masks and samples.
pub fn evaluate_reconstruction(
    params: &ParamStore<f32>,
    tables: &[Vec<String>],
    sources: &[PretrainSource<'_>],
    seeds: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<ReconstructionReport> {
    let indexes: Vec<NeighborIndex> = sources
        .iter()
        .map(|s| NeighborIndex::build(s.graph))
        .collect();
    evaluate_with(params, tables, sources, &indexes, seeds, cfg)
}

fn evaluate_with(
    params: &ParamStore<f32>,
    tables: &[Vec<String>],
    sources: &[PretrainSource<'_>],
    indexes: &[NeighborIndex],
    seeds: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<ReconstructionReport> {
    let loss_cfg = cfg.loss();
    let mut jobs = Vec::new();
    for (db, s) in seeds.iter().enumerate() {
        for (b, chunk) in s.chunks(cfg.batch_size.max(1)).enumerate() {
            jobs.push((db, b as u64, chunk));
        }
    }
    let parts: Vec<Option<(usize, [f64; 4])>> = jobs
        .par_iter()
        .map(|&(db, b, chunk)| {
            let pb = prepare_batch(
                &sources[db],
                &indexes[db],
                db,
                chunk,
                &cfg.fanout,
                cfg.mask_prob,
                cfg.seed,
                VAL_EPOCH,
                b,
            )?;
            let d = pb.target.cols();
            let n = counted_rows(&pb.mask, d);
            if n == 0 {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let l = reconstruction_loss(
                &mut tape,
                params,
                &tables[db],
                &pb.sub,
                pb.x,
                &pb.target,
                &pb.mask,
                &loss_cfg,
            )?;
            let per_dim = loss::masked_mse_per_dim(
                tape.value(l.prediction).data(),
                pb.target.data(),
                &pb.mask,
                d,
            )?;
            let v = |v: Var| tape.value(v).item().map(|x| x as f64);
            Ok(Some((n, [v(l.combined)?, v(l.cos)?, v(l.mse)?, per_dim])))
        })
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 4];
    let mut nodes = 0;
    for (n, vals) in parts.into_iter().flatten() {
        nodes += n;
        sums.iter_mut()
            .zip(vals)
            .for_each(|(s, v)| *s += v * n as f64);
    }
    if nodes == 0 {
        return Err(Error::invalid("no masked dimensions"));
    }
    let w = 1.0 / nodes as f64;
    Ok(ReconstructionReport {
        combined: sums[0] * w,
        cos: sums[1] * w,
        mse: sums[2] * w,
        mse_per_dim: sums[3] * w,
        nodes,
    })
}

pub fn run_pretraining(
    sources: &[PretrainSource<'_>],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    run_pretraining_with(sources, cfg, |_, _| Ok(()))
}

/// Pretrains and calls `on_epoch(epoch, params)` after every epoch.
pub fn run_pretraining_with(
    sources: &[PretrainSource<'_>],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, &ParamStore<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("no databases to pretrain on"))?;
    let d_in = first.features.dim;
    if let Some(bad) = sources.iter().find(|s| s.features.dim != d_in) {
        return Err(Error::invalid(format!(
            "dimension mismatch across databases: '{}' has {}, '{}' has {}",
            first.name, d_in, bad.name, bad.features.dim
        )));
    }
    for s in sources {
        s.features.check_shapes(&s.graph.shapes())?;
    }
    let qualify = sources.len() > 1;
    let tables: Vec<Vec<String>> = sources.iter().map(|s| type_names(s, qualify)).collect();
    let all_tables: Vec<String> = tables.iter().flatten().cloned().collect();
    let model = ModelConfig {
        d_in,
        d_hidden: cfg.hidden_channels,
        layers: cfg.layers,
    };
    let mut params = init_params(&all_tables, &model, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr))?;
    let indexes: Vec<NeighborIndex> = sources
        .iter()
        .map(|s| NeighborIndex::build(s.graph))
        .collect();
    let (train, val) = split_seeds(sources, cfg.val_fraction, cfg.seed);
    let loss_cfg = cfg.loss();
    let window = rayon::current_num_threads().max(1) * 2;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>, ReconstructionReport)> = None;
    for epoch in 1..=cfg.epochs {
        let schedule = BatchSchedule::build(&train, cfg.batch_size, cfg.seed, epoch as u64);
        let mut sums = [0.0; 3];
        let mut counted = 0usize;
        let jobs: Vec<(u64, &(usize, Vec<usize>))> = schedule
            .batches
            .iter()
            .enumerate()
            .map(|(i, b)| (i as u64, b))
            .collect();
        for chunk in jobs.chunks(window) {
            let prepared: Vec<PreparedBatch> = chunk
                .par_iter()
                .map(|&(i, (db, seeds))| {
                    prepare_batch(
                        &sources[*db],
                        &indexes[*db],
                        *db,
                        seeds,
                        &cfg.fanout,
                        cfg.mask_prob,
                        cfg.seed,
                        epoch as u64,
                        i,
                    )
                })
                .collect::<Result<_>>()?;
            for pb in prepared {
                if counted_rows(&pb.mask, pb.target.cols()) == 0 {
                    debug!("batch without masked dimensions skipped");
                    continue;
                }
                let mut tape = Tape::new();
                let l = reconstruction_loss(
                    &mut tape,
                    &params,
                    &tables[pb.db],
                    &pb.sub,
                    pb.x,
                    &pb.target,
                    &pb.mask,
                    &loss_cfg,
                )?;
                let vals = [l.combined, l.cos, l.mse].map(|v| tape.value(v).data()[0] as f64);
                if !vals[0].is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite training loss in epoch {epoch}"
                    )));
                }
                let grads = tape.backward(l.combined)?;
                params.accumulate(&grads)?;
                adam.step(&mut params);
                sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
                counted += 1;
            }
        }
        let c = counted.max(1) as f64;
        history.push(LossRecord {
            epoch,
            split: "train",
            combined: sums[0] / c,
            cos: sums[1] / c,
            mse: sums[2] / c,
        });
        let score = if val.iter().any(|v| !v.is_empty()) {
            let r = evaluate_with(&params, &tables, sources, &indexes, &val, cfg)?;
            history.push(LossRecord {
                epoch,
                split: "val",
                combined: r.combined,
                cos: r.cos,
                mse: r.mse,
            });
            Some(r)
        } else {
            None
        };
        info!(
            "epoch {epoch}: train {:.6}{}",
            sums[0] / c,
            score.map_or(String::new(), |r| format!(", val {:.6}", r.combined))
        );
        on_epoch(epoch, &params)?;
        let key = score.map_or(sums[0] / c, |r| r.combined);
        if best.as_ref().is_none_or(|(k, ..)| key < *k) {
            best = Some((key, epoch, params.clone(), score.unwrap_or_default()));
        }
    }
    let (best_epoch, params, validation) = match best {
        Some((_, e, p, r)) => (e, p, r),
        None => (0, params, ReconstructionReport::default()),
    };
    Ok(PretrainOutcome {
        params,
        tables,
        history,
        best_epoch,
        validation,
        val_seeds: val,
    })
}
