//! Command-line entry point. Every subcommand reads and writes plain files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::downstream::{
    evaluate_splits, load_task_table, metrics_csv, run_ablation, train_downstream, AblationInputs,
    Arm, DateScale, DownstreamConfig, Splits, TaskContext, TaskManifest, TaskModel, TaskTable,
};
use crate::encoders::{
    encode_hashed, gen_random_embeddings, load_embedding_file, write_embedding_file,
    EmbeddingMatrix, EncoderConfig, EncoderMethod, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::hetgnn::NeighborIndex;
use crate::pretrain::{loss_history_csv, run_pretraining_with, PretrainConfig, PretrainSource};
use crate::relmodel::{
    open_database, read_graph, write_graph, Database, EntityGraph, GraphOptions, LoadOptions,
};
use crate::rowtext::{
    export_corpus, linearize_by_index, split_corpus, static_mask_plans, MaskProbs,
};
use crate::synth::{generate_database, SynthProfile, Topology};
use crate::tensor::{load_checkpoint, save_checkpoint};

#[derive(Debug, Parser)]
#[command(
    name = "relfm",
    version,
    about = "Relational entity graphs, GNN pretraining and task adaptation"
)]
pub struct Cli {
    /// Threads used for batch preparation and encoding.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Single worker thread; runs are then reproducible to the bit.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Build the relational entity graph of a database and write it as a binary file.
    BuildGraph(BuildGraphArgs),
    /// Export a linearized, masked text corpus for encoder fine-tuning.
    Linearize(LinearizeArgs),
    /// Write node features (REMB) for every row of a database.
    Encode(EncodeArgs),
    /// Masked-reconstruction pretraining over one or more graphs.
    Pretrain(PretrainArgs),
    /// Train a task head and report metrics on every split.
    Adapt(AdaptArgs),
    /// Score a saved task model.
    Eval(EvalArgs),
    /// Run the six-configuration feature/GNN ablation.
    Ablate(AblateArgs),
    /// Generate a synthetic database with a planted task.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DatabaseArgs {
    /// Schema manifest; table files are resolved relative to it.
    #[arg(long)]
    pub schema: PathBuf,
    /// Keep only the first N rows of each table.
    #[arg(long)]
    pub row_cap: Option<usize>,
    /// Fail on dangling foreign keys instead of dropping the edge.
    #[arg(long)]
    pub strict: bool,
}

impl DatabaseArgs {
    fn open(&self) -> Result<Database> {
        open_database(
            &self.schema,
            LoadOptions {
                row_cap: self.row_cap,
            },
            GraphOptions {
                strict: self.strict,
            },
        )
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildGraphArgs {
    #[command(flatten)]
    pub db: DatabaseArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a text dump with one `EDGE` line per edge.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LinearizeArgs {
    #[command(flatten)]
    pub db: DatabaseArgs,
    /// Output directory for the corpus files.
    #[arg(long)]
    pub out: PathBuf,
    /// Total rows to sample across tables.
    #[arg(long, default_value_t = 100_000)]
    pub total: usize,
    /// Rows per table; defaults to total / number of tables.
    #[arg(long)]
    pub per_table_quota: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Hashed,
    File,
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub db: DatabaseArgs,
    #[arg(long, value_enum, default_value = "hashed")]
    pub method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// REMB file to load (method `file`).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// REMB file whose value range is matched (method `random`).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// JSON pretraining config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated graph files.
    #[arg(long, value_delimiter = ',', required = true)]
    pub graphs: Vec<PathBuf>,
    /// Comma-separated REMB files, one per graph.
    #[arg(long, value_delimiter = ',', required = true)]
    pub features: Vec<PathBuf>,
    /// Directory for the loss history and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TaskArgs {
    #[command(flatten)]
    pub db: DatabaseArgs,
    /// Task CSV `entity_id,timestamp,label`.
    #[arg(long)]
    pub task: PathBuf,
    /// Task manifest; defaults to `task.json` next to the task file.
    #[arg(long)]
    pub task_manifest: Option<PathBuf>,
    /// Node features of the target database.
    #[arg(long)]
    pub features: PathBuf,
    /// JSON downstream config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shuffled 70/15/15 split instead of the temporal one.
    #[arg(long)]
    pub random_split: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// `frozen`, `finetune` or `no_gnn`.
    #[arg(long)]
    pub mode: String,
    /// Pretrained checkpoint supplying the conv layers.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the selected task model.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Mode the model was trained with.
    #[arg(long)]
    pub mode: String,
    /// Task model written by `adapt --save-model`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the random-feature baseline.
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileArg {
    Star,
    Chain,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "star")]
    pub profile: ProfileArg,
    /// JSON profile overriding the defaults; `--profile` still sets the topology.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on invalid input or usage, 2 on I/O failure.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("RELFM_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn configure_workers(cli: &Cli) -> Result<()> {
    let n = if cli.deterministic {
        Some(1)
    } else {
        cli.workers
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::invalid("--workers must be positive"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn log_resolved<T: Serialize>(what: &str, value: &T) {
    info!(
        "{what}: {}",
        serde_json::to_string(value).expect("serializable")
    );
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    configure_workers(cli)?;
    info!(
        "workers: {}, deterministic: {}",
        rayon::current_num_threads(),
        cli.deterministic
    );
    log_resolved("arguments", &cli.command);
    match &cli.command {
        Command::BuildGraph(a) => build_graph(a),
        Command::Linearize(a) => linearize(a),
        Command::Encode(a) => encode(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_graph(a: &BuildGraphArgs) -> Result<()> {
    let db = a.db.open()?;
    let g = &db.graph;
    info!(
        "graph: {} nodes, {} edges over {} relations, {} dangling references dropped",
        g.num_nodes(),
        g.num_edges(),
        g.relations.len(),
        g.dangling
    );
    write_graph(g, &a.out)?;
    if let Some(dump) = &a.dump {
        write_text(dump, &g.dump())?;
    }
    Ok(())
}

fn linearize(a: &LinearizeArgs) -> Result<()> {
    let db = a.db.open()?;
    let n_tables = db.manifest.tables.len().max(1);
    let quota = a.per_table_quota.unwrap_or(a.total / n_tables);
    info!("per-table quota: {quota}");
    let mut rows = Vec::new();
    for ti in 0..db.manifest.tables.len() {
        let n = db.store.row_count(ti);
        let mut picked = if quota >= n {
            (0..n).collect()
        } else {
            let mut rng = crate::rng::rng_for(a.seed, &[0x11e, ti as u64]);
            rand::seq::index::sample(&mut rng, n, quota).into_vec()
        };
        picked.sort_unstable();
        for i in picked {
            rows.push(linearize_by_index(&db.manifest, &db.store, ti, i)?);
        }
    }
    let plans = static_mask_plans(&rows, &MaskProbs::default(), a.seed)?;
    let split = split_corpus(rows.len(), a.seed);
    info!(
        "corpus: {} rows ({} train, {} valid, {} test)",
        rows.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    export_corpus(&rows, &plans, &split, &a.out)
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let cfg = EncoderConfig {
        method: match a.method {
            MethodArg::Hashed => EncoderMethod::Hashed,
            MethodArg::File => EncoderMethod::File,
            MethodArg::Random => EncoderMethod::Random,
        },
        dim: a.dim,
        seed: a.seed,
        source: a.source.clone(),
        reference: a.reference.clone(),
    };
    cfg.validate()?;
    let db = a.db.open()?;
    let shapes = db.graph.shapes();
    let m = match cfg.method {
        EncoderMethod::Hashed => encode_hashed(&db.manifest, &db.store, cfg.dim, cfg.seed)?,
        EncoderMethod::File => {
            load_embedding_file(cfg.source.as_deref().expect("validated"), &shapes)?
        }
        EncoderMethod::Random => {
            let reference =
                load_embedding_file(cfg.reference.as_deref().expect("validated"), &shapes)?;
            gen_random_embeddings(&reference, cfg.seed)?
        }
    };
    write_embedding_file(&m, &a.out)
}

fn source_name(path: &Path, i: usize) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("db{i}"))
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => PretrainConfig::load(p)?,
        None => PretrainConfig::default(),
    };
    log_resolved("pretraining config", &cfg);
    if a.graphs.len() != a.features.len() {
        return Err(Error::invalid(format!(
            "{} graphs but {} feature files",
            a.graphs.len(),
            a.features.len()
        )));
    }
    let mut names: Vec<String> = a
        .graphs
        .iter()
        .enumerate()
        .map(|(i, p)| source_name(p, i))
        .collect();
    if names
        .iter()
        .enumerate()
        .any(|(i, n)| names[..i].contains(n))
    {
        names = (0..names.len()).map(|i| format!("db{i}")).collect();
    }
    let graphs = a
        .graphs
        .iter()
        .map(|p| read_graph(p))
        .collect::<Result<Vec<EntityGraph>>>()?;
    let feats = a
        .features
        .iter()
        .zip(&graphs)
        .map(|(p, g)| load_embedding_file(p, &g.shapes()))
        .collect::<Result<Vec<EmbeddingMatrix>>>()?;
    let sources: Vec<PretrainSource<'_>> = names
        .iter()
        .zip(graphs.iter().zip(&feats))
        .map(|(name, (graph, features))| PretrainSource {
            name,
            graph,
            features,
        })
        .collect();
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let outcome = run_pretraining_with(&sources, &cfg, |epoch, params| {
        save_checkpoint(params, &a.out.join(format!("epoch_{epoch:03}.rfmp")))
    })?;
    write_text(
        &a.out.join("loss_history.csv"),
        &loss_history_csv(&outcome.history),
    )?;
    save_checkpoint(&outcome.params, &a.out.join("best.rfmp"))?;
    info!(
        "best epoch {}: validation loss {:.6}, per-dimension masked MSE {:.6e}",
        outcome.best_epoch, outcome.validation.combined, outcome.validation.mse_per_dim
    );
    Ok(())
}

/// Database, features and task loaded for one of the task commands.
struct TaskData {
    db: Database,
    index: NeighborIndex,
    features: EmbeddingMatrix,
    task: TaskTable,
    splits: Splits,
    cfg: DownstreamConfig,
}

impl TaskData {
    fn load(a: &TaskArgs) -> Result<Self> {
        let cfg = match &a.config {
            Some(p) => {
                let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                DownstreamConfig::from_json_str(&raw)?
            }
            None => DownstreamConfig::default(),
        };
        log_resolved("downstream config", &cfg);
        let manifest_path = a
            .task_manifest
            .clone()
            .unwrap_or_else(|| a.task.parent().unwrap_or(Path::new(".")).join("task.json"));
        let tm = TaskManifest::load(&manifest_path)?;
        log_resolved("task manifest", &tm);
        let db = a.db.open()?;
        let task = load_task_table(&a.task, &db.manifest, &db.store, &tm.entity_table)?;
        let splits = if a.random_split {
            Splits::random(&task, cfg.seed)
        } else {
            Splits::temporal(&task, &tm.time_split)
        };
        info!(
            "task rows: {} train, {} val, {} test",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        );
        let features = load_embedding_file(&a.features, &db.graph.shapes())?;
        let index = NeighborIndex::build(&db.graph);
        Ok(TaskData {
            db,
            index,
            features,
            task,
            splits,
            cfg,
        })
    }

    fn ctx(&self) -> TaskContext<'_> {
        TaskContext {
            graph: &self.db.graph,
            index: &self.index,
            features: &self.features,
            task: &self.task,
            splits: &self.splits,
        }
    }
}

fn adapt(a: &AdaptArgs) -> Result<()> {
    let arm: Arm = a.mode.parse()?;
    let data = TaskData::load(&a.task)?;
    let pretrained = a
        .checkpoint
        .as_deref()
        .map(load_checkpoint::<f32>)
        .transpose()?;
    let trained = train_downstream(pretrained.as_ref(), &data.ctx(), arm, &data.cfg)?;
    info!("selected epoch {}", trained.best_epoch);
    let rows = evaluate_splits(&trained.model, &data.ctx(), &data.cfg, &arm.to_string())?;
    write_text(&a.out, &metrics_csv(&rows))?;
    if let Some(p) = &a.save_model {
        save_checkpoint(&trained.model.params, p)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let arm: Arm = a.mode.parse()?;
    let data = TaskData::load(&a.task)?;
    let times: Vec<_> = data
        .splits
        .train
        .iter()
        .map(|&i| data.task.rows[i].time)
        .collect();
    let model = TaskModel {
        arm,
        params: load_checkpoint(&a.model)?,
        tables: data.db.graph.table_names(),
        date: DateScale::fit(&times)?,
    };
    let rows = evaluate_splits(&model, &data.ctx(), &data.cfg, &arm.to_string())?;
    write_text(&a.out, &metrics_csv(&rows))
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let data = TaskData::load(&a.task)?;
    let random = gen_random_embeddings(&data.features, a.random_seed)?;
    let pretrained = a
        .checkpoint
        .as_deref()
        .map(load_checkpoint::<f32>)
        .transpose()?;
    let rows = run_ablation(
        &AblationInputs {
            graph: &data.db.graph,
            index: &data.index,
            task: &data.task,
            splits: &data.splits,
            informative: &data.features,
            random: &random,
            pretrained: pretrained.as_ref(),
        },
        &data.cfg,
    )?;
    write_text(&a.out, &metrics_csv(&rows))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut profile = match &a.config {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&raw)
                .map_err(|e| Error::invalid(format!("synthetic profile: {e}")))?
        }
        None => SynthProfile::default(),
    };
    profile.topology = match a.profile {
        ProfileArg::Star => Topology::Star,
        ProfileArg::Chain => Topology::Chain,
    };
    if let Some(seed) = a.seed {
        profile.seed = seed;
    }
    log_resolved("synthetic profile", &profile);
    let db = generate_database(&profile)?;
    info!("{} tie-break coin flips in the labels", db.coin_flips);
    let schema = db.write(&a.out)?;
    info!("wrote {}", schema.display());
    Ok(())
}
