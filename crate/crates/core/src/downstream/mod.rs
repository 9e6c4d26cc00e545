//! Entity classification on a target database: fresh typed projections, a
//! date encoder and an MLP head on top of a (frozen or fine-tuned) shared GNN.

mod metrics;
mod task;

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::hetgnn::{
    add_backbone, conv_self, forward, gather_features, init_weight, proj_bias, proj_weight,
    sample_disjoint, FanoutSpec, ModelConfig, NeighborIndex, SampledSubgraph,
};
use crate::relmodel::{Day, EntityGraph};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Scalar, Tape, Tensor, Var};

pub use metrics::{metrics_csv, precision_accuracy_f1, roc_auc, MetricRow, Thresholded, UNDEFINED};
pub use task::{load_task_table, Splits, TaskManifest, TaskRow, TaskTable, TimeSplit};

const STREAM_SHUFFLE: u64 = 0xd1;
const STREAM_SAMPLE: u64 = 0xd2;
const STREAM_DROPOUT: u64 = 0xd3;
const STREAM_INIT: u64 = 0xd4;
const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Frozen,
    Finetune,
}

/// Which representation feeds the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Raw entity features, no message passing.
    NoGnn,
    Gnn(AdaptMode),
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::NoGnn => "no_gnn",
            Arm::Gnn(AdaptMode::Frozen) => "frozen",
            Arm::Gnn(AdaptMode::Finetune) => "finetune",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_gnn" | "no-gnn" => Ok(Arm::NoGnn),
            "frozen" => Ok(Arm::Gnn(AdaptMode::Frozen)),
            "finetune" => Ok(Arm::Gnn(AdaptMode::Finetune)),
            _ => Err(Error::invalid(format!(
                "unknown mode '{s}' (expected frozen, finetune or no_gnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub fanout: FanoutSpec,
    pub seed: u64,
    /// Exclude neighbors newer than each row's seed time.
    pub time_filter: bool,
    pub dropout_keep: f64,
    pub hidden_channels: usize,
    pub layers: usize,
    pub head_hidden: [usize; 2],
    pub date_dim: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            epochs: 30,
            batch_size: 256,
            lr: 1e-4,
            fanout: FanoutSpec::default(),
            seed: 0,
            time_filter: true,
            dropout_keep: 0.8,
            hidden_channels: 256,
            layers: 2,
            head_hidden: [128, 64],
            date_dim: 32,
        }
    }
}

impl DownstreamConfig {
    pub fn from_json_str(raw: &str) -> Result<Self> {
        let cfg: DownstreamConfig = serde_json::from_str(raw)
            .map_err(|e| Error::invalid(format!("downstream config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden_channels == 0 || self.date_dim == 0 {
            return Err(Error::invalid(
                "batch_size, hidden_channels and date_dim must be positive",
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::invalid(format!(
                "dropout_keep {} not in (0, 1]",
                self.dropout_keep
            )));
        }
        if self.fanout.len() != self.layers {
            return Err(Error::invalid(format!(
                "fanout has {} hops for {} layers",
                self.fanout.len(),
                self.layers
            )));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// Standardization constants for seed times, fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DateScale {
    pub mean: f64,
    pub std: f64,
}

impl DateScale {
    pub fn fit(times: &[Day]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("no seed times to fit the date encoder"));
        }
        let n = times.len() as f64;
        let mean = times.iter().map(|&t| t as f64).sum::<f64>() / n;
        let var = times
            .iter()
            .map(|&t| (t as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        if var <= 0.0 {
            return Err(Error::invalid("degenerate time range"));
        }
        Ok(DateScale {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn normalize(&self, t: Day) -> f64 {
        (t as f64 - self.mean) / self.std
    }
}

/// `linear(ReLU(linear(t)))` on standardized seed times, one row per time.
pub fn encode_date<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    times: &[f64],
) -> Result<Var> {
    let t = tape.constant(Tensor::matrix(
        times.len(),
        1,
        times.iter().map(|&v| T::lit(v)).collect(),
    )?);
    let (w1, b1) = (
        tape.param(params, "date.l1.W")?,
        tape.param(params, "date.l1.b")?,
    );
    let h = tape.linear(t, w1, b1)?;
    let h = tape.relu(h);
    let (w2, b2) = (
        tape.param(params, "date.l2.W")?,
        tape.param(params, "date.l2.b")?,
    );
    tape.linear(h, w2, b2)
}

/// Inputs to the head for one batch of task rows.
pub enum TaskInput<'s, T> {
    /// Raw entity feature rows.
    Raw(Tensor<T>),
    /// Sampled neighborhoods and features of their nodes.
    Graph(&'s SampledSubgraph, Tensor<T>),
}

/// Logits `[n × 2]` for a batch; dropout is active when `dropout` is given.
pub fn task_logits<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    tables: &[String],
    input: TaskInput<'_, T>,
    times: &[f64],
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let emb = match input {
        TaskInput::Raw(x) => tape.constant(x),
        TaskInput::Graph(sub, x) => {
            let xv = tape.constant(x);
            forward(tape, params, tables, sub, xv)?
        }
    };
    let date = encode_date(tape, params, times)?;
    let mut h = tape.concat_cols(emb, date)?;
    let (keep, mut rng) = match dropout {
        Some((k, r)) => (k, Some(r)),
        None => (1.0, None),
    };
    for l in 1..=3 {
        let w = tape.param(params, &format!("head.l{l}.W"))?;
        let b = tape.param(params, &format!("head.l{l}.b"))?;
        h = tape.linear(h, w, b)?;
        if l < 3 {
            h = tape.relu(h);
            if let Some(r) = rng.as_deref_mut() {
                h = tape.dropout(h, keep, true, r)?;
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct TaskModel {
    pub arm: Arm,
    pub params: ParamStore<f32>,
    pub tables: Vec<String>,
    pub date: DateScale,
}

/// Fresh projections, date encoder and head; conv layers copied from
/// `pretrained` when given. Frozen mode marks the conv layers non-trainable.
pub fn build_task_model(
    tables: &[String],
    d_in: usize,
    arm: Arm,
    pretrained: Option<&ParamStore<f32>>,
    date: DateScale,
    cfg: &DownstreamConfig,
) -> Result<TaskModel> {
    let seed = derive_seed(cfg.seed, &[STREAM_INIT]);
    let mut p = ParamStore::new();
    let h = cfg.hidden_channels;
    let head_in = match arm {
        Arm::NoGnn => d_in,
        Arm::Gnn(mode) => {
            for t in tables {
                p.insert(proj_weight(t), init_weight(&proj_weight(t), d_in, h, seed));
                p.insert(proj_bias(t), Tensor::zeros(vec![h]));
            }
            match pretrained {
                Some(src) => {
                    for l in 1..=cfg.layers {
                        let w = src.get(&conv_self(l)).map_err(|_| {
                            Error::invalid(format!("pretrained model lacks conv layer {l}"))
                        })?;
                        if w.shape() != [h, h] {
                            return Err(Error::invalid(format!(
                                "incompatible hidden dims: pretrained {:?}, configured {h}",
                                w.shape()
                            )));
                        }
                    }
                    if src.contains(&conv_self(cfg.layers + 1)) {
                        return Err(Error::invalid(format!(
                            "pretrained model has more than {} conv layers",
                            cfg.layers
                        )));
                    }
                    for (name, param) in src.iter().filter(|(n, _)| n.starts_with("conv")) {
                        p.insert(name, param.value.clone());
                    }
                }
                None => {
                    let model = ModelConfig {
                        d_in,
                        d_hidden: h,
                        layers: cfg.layers,
                    };
                    let mut backbone = ParamStore::new();
                    add_backbone(&mut backbone, &model, seed);
                    for (name, param) in backbone.iter().filter(|(n, _)| n.starts_with("conv")) {
                        p.insert(name, param.value.clone());
                    }
                }
            }
            if mode == AdaptMode::Frozen {
                p.set_trainable("conv", false);
            }
            h
        }
    };
    let dd = cfg.date_dim;
    p.insert("date.l1.W", init_weight("date.l1.W", 1, dd, seed));
    p.insert("date.l1.b", Tensor::zeros(vec![dd]));
    p.insert("date.l2.W", init_weight("date.l2.W", dd, dd, seed));
    p.insert("date.l2.b", Tensor::zeros(vec![dd]));
    let dims = [head_in + dd, cfg.head_hidden[0], cfg.head_hidden[1], 2];
    for l in 1..=3 {
        let w = format!("head.l{l}.W");
        p.insert(w.clone(), init_weight(&w, dims[l - 1], dims[l], seed));
        p.insert(format!("head.l{l}.b"), Tensor::zeros(vec![dims[l]]));
    }
    Ok(TaskModel {
        arm,
        params: p,
        tables: tables.to_vec(),
        date,
    })
}

/// Everything a task run reads; all of it is shared read-only.
#[derive(Clone, Copy)]
pub struct TaskContext<'a> {
    pub graph: &'a EntityGraph,
    pub index: &'a NeighborIndex,
    pub features: &'a EmbeddingMatrix,
    pub task: &'a TaskTable,
    pub splits: &'a Splits,
}

impl TaskContext<'_> {
    fn entity_table(&self) -> Result<usize> {
        self.graph
            .table_index(&self.task.entity_table)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "entity table '{}' not in graph",
                    self.task.entity_table
                ))
            })
    }
}

struct Batch {
    sub: Option<SampledSubgraph>,
    x: Tensor<f32>,
    times: Vec<f64>,
    labels: Vec<usize>,
}

fn prepare(
    ctx: &TaskContext<'_>,
    model: &TaskModel,
    rows: &[usize],
    cfg: &DownstreamConfig,
    sample_seed: u64,
) -> Result<Batch> {
    let et = ctx.entity_table()?;
    let task_rows: Vec<&TaskRow> = rows.iter().map(|&i| &ctx.task.rows[i]).collect();
    let times = task_rows
        .iter()
        .map(|r| model.date.normalize(r.time))
        .collect();
    let labels = task_rows.iter().map(|r| r.label as usize).collect();
    match model.arm {
        Arm::NoGnn => {
            let block = ctx.features.block(&ctx.task.entity_table).ok_or_else(|| {
                Error::invalid(format!(
                    "missing feature block for table '{}'",
                    ctx.task.entity_table
                ))
            })?;
            let d = ctx.features.dim;
            let mut data = Vec::with_capacity(rows.len() * d);
            for r in &task_rows {
                data.extend_from_slice(block.row(r.entity, d));
            }
            Ok(Batch {
                sub: None,
                x: Tensor::matrix(rows.len(), d, data)?,
                times,
                labels,
            })
        }
        Arm::Gnn(_) => {
            let seeds: Vec<(usize, Option<Day>)> = task_rows
                .iter()
                .map(|r| {
                    (
                        ctx.graph.global(et, r.entity),
                        cfg.time_filter.then_some(r.time),
                    )
                })
                .collect();
            let sub = sample_disjoint(ctx.graph, ctx.index, &seeds, &cfg.fanout, sample_seed);
            let x = gather_features(ctx.graph, ctx.features, &sub)?;
            Ok(Batch {
                sub: Some(sub),
                x,
                times,
                labels,
            })
        }
    }
}

fn batch_logits(
    tape: &mut Tape<f32>,
    model: &TaskModel,
    b: Batch,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<(Var, Vec<usize>)> {
    let input = match &b.sub {
        Some(sub) => TaskInput::Graph(sub, b.x),
        None => TaskInput::Raw(b.x),
    };
    let logits = task_logits(tape, &model.params, &model.tables, input, &b.times, dropout)?;
    Ok((logits, b.labels))
}

/// Class-1 probabilities for `rows`, in order. Sampling is seeded per row, so
/// results do not depend on batching or thread count.
pub fn predict(
    model: &TaskModel,
    ctx: &TaskContext<'_>,
    rows: &[usize],
    cfg: &DownstreamConfig,
) -> Result<Vec<f64>> {
    let sample_seed = derive_seed(cfg.seed, &[STREAM_SAMPLE, EVAL_EPOCH]);
    let parts: Vec<Vec<f64>> = rows
        .par_chunks(cfg.batch_size.max(1))
        .map(|chunk| {
            let b = prepare(ctx, model, chunk, cfg, sample_seed)?;
            let mut tape = Tape::new();
            let (logits, _) = batch_logits(&mut tape, model, b, None)?;
            Ok(tape
                .value(logits)
                .data()
                .chunks_exact(2)
                .map(|z| {
                    let (a, b) = (z[0] as f64, z[1] as f64);
                    1.0 / (1.0 + (a - b).exp())
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

pub struct TrainedTask {
    /// Parameters from the epoch with the best validation ROC-AUC.
    pub model: TaskModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Cross-entropy training with best-validation-AUC selection.
pub fn train_downstream(
    pretrained: Option<&ParamStore<f32>>,
    ctx: &TaskContext<'_>,
    arm: Arm,
    cfg: &DownstreamConfig,
) -> Result<TrainedTask> {
    cfg.validate()?;
    if ctx.splits.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let train_times: Vec<Day> = ctx
        .splits
        .train
        .iter()
        .map(|&i| ctx.task.rows[i].time)
        .collect();
    let date = DateScale::fit(&train_times)?;
    let tables = ctx.graph.table_names();
    let mut model = build_task_model(&tables, ctx.features.dim, arm, pretrained, date, cfg)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr))?;
    let val_labels = ctx.task.labels(&ctx.splits.val);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let mut order = ctx.splits.train.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[STREAM_SHUFFLE, e]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bi = bi as u64;
            let b = prepare(
                ctx,
                &model,
                chunk,
                cfg,
                derive_seed(cfg.seed, &[STREAM_SAMPLE, e, bi]),
            )?;
            let mut drop_rng = rng_for(cfg.seed, &[STREAM_DROPOUT, e, bi]);
            let mut tape = Tape::new();
            let (logits, labels) = batch_logits(
                &mut tape,
                &model,
                b,
                Some((cfg.dropout_keep, &mut drop_rng)),
            )?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite training loss in epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            model.params.accumulate(&grads)?;
            adam.step(&mut model.params);
            total += lv;
            batches += 1;
        }
        let val_auc = if ctx.splits.val.is_empty() {
            None
        } else {
            let probs = predict(&model, ctx, &ctx.splits.val, cfg)?;
            let pairs: Vec<(f64, u8)> = probs.into_iter().zip(val_labels.iter().copied()).collect();
            roc_auc(&pairs).ok()
        };
        let train_loss = total / batches.max(1) as f64;
        info!("{arm} epoch {epoch}: train loss {train_loss:.5}, val auc {val_auc:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        // without a usable validation signal the last epoch wins
        let score = val_auc.unwrap_or(f64::INFINITY);
        if best
            .as_ref()
            .is_none_or(|(s, ..)| score > *s || score == f64::INFINITY)
        {
            best = Some((score, epoch, model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, e, p)) => {
            model.params = p;
            e
        }
        None => 0,
    };
    Ok(TrainedTask {
        model,
        history,
        best_epoch,
    })
}

/// Metric rows for the train, validation and test splits.
pub fn evaluate_splits(
    model: &TaskModel,
    ctx: &TaskContext<'_>,
    cfg: &DownstreamConfig,
    config: &str,
) -> Result<Vec<MetricRow>> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        let rows = ctx.splits.get(split).expect("known split");
        if rows.is_empty() {
            continue;
        }
        let probs = predict(model, ctx, rows, cfg)?;
        out.push(MetricRow::compute(
            config,
            split,
            &probs,
            &ctx.task.labels(rows),
        )?);
    }
    Ok(out)
}

/// Inputs shared by every configuration of the ablation.
pub struct AblationInputs<'a> {
    pub graph: &'a EntityGraph,
    pub index: &'a NeighborIndex,
    pub task: &'a TaskTable,
    pub splits: &'a Splits,
    pub informative: &'a EmbeddingMatrix,
    pub random: &'a EmbeddingMatrix,
    pub pretrained: Option<&'a ParamStore<f32>>,
}

/// {informative, random} features × {no GNN, frozen, fine-tuned}, test split.
pub fn run_ablation(inputs: &AblationInputs<'_>, cfg: &DownstreamConfig) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (source, feats) in [
        ("informative", inputs.informative),
        ("random", inputs.random),
    ] {
        let ctx = TaskContext {
            graph: inputs.graph,
            index: inputs.index,
            features: feats,
            task: inputs.task,
            splits: inputs.splits,
        };
        for arm in [
            Arm::NoGnn,
            Arm::Gnn(AdaptMode::Frozen),
            Arm::Gnn(AdaptMode::Finetune),
        ] {
            let trained = train_downstream(inputs.pretrained, &ctx, arm, cfg)?;
            let probs = predict(&trained.model, &ctx, &inputs.splits.test, cfg)?;
            let name = format!("{source}+{arm}");
            let row = MetricRow::compute(
                &name,
                "test",
                &probs,
                &inputs.task.labels(&inputs.splits.test),
            )?;
            info!("{name}: test auc {:?}", row.roc_auc);
            rows.push(row);
        }
    }
    Ok(rows)
}
