use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spqi::catalog::{category_spq_rates, purchase_window_correlations, user_pair_correlation, CategoryId, Dataset, Question, Split, WindowCorrelations};
use spqi::embeddings::{train_skipgram, BehavioralEmbeddings, CatalogIndex, HashedBagEncoder};
use spqi::gat::Variant;
use spqi::graph::SamplingStrategy;
use spqi::moe::{FeatureMask, Subset};
use spqi::synth::{calibrate_signal, generate_dataset, split_balance};
use spqi::training::{
    evaluate, paired_significance, predict, run_ablation_grid, train_multistage, EpochRecord, GridRecord, Metrics,
    Prepared, Significance, THRESHOLD,
};
use spqi::Execution;

use crate::checkpoint::{Checkpoint, ModelInfo, Seeds};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.spq";
pub const HISTORY_FILE: &str = "history.json";
pub const GRID_FILE: &str = "grid.json";

/// Shopping product question identification experiments.
///
/// SPQI_THREADS sets the worker count (default 1).
#[derive(Debug, Parser)]
#[command(name = "spqi", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train skip-gram vectors on a dataset's purchase log.
    Pretrain(PretrainArgs),
    /// Train one model and write its checkpoint and epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and test every ablation cell over several seeds.
    Grid(GridArgs),
    /// Purchase-window and user-pair correlations of a dataset.
    Analyze(AnalyzeArgs),
    /// Score a file of questions with a checkpoint.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `synth.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Calibrate the prior-purchase weight to this correlation first.
    #[arg(long)]
    pub target_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `skipgram.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// text-only-q, text-only-qa, mlp-concat, mlp-moe, spqi-concat or spqi-moe.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Comma-separated families (text, product, behavior, full) or single types.
    #[arg(long, value_parser = parse_features)]
    pub features: Option<FeatureMask>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip-gram file from `pretrain`; trained inline when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, validation or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds; overrides `grid_seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose catalog and purchase history the questions refer to.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON lines of question records.
    #[arg(long)]
    pub question_file: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: spqi::Error| e.to_string())
}

fn parse_features(s: &str) -> std::result::Result<FeatureMask, String> {
    s.parse().map_err(|e: spqi::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: spqi::Error| e.to_string())
}

/// Worker count from SPQI_THREADS; 1 runs sequentially.
pub fn execution_from_env() -> Result<Execution> {
    let threads = match std::env::var("SPQI_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("SPQI_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    spqi::exec::init_threads(threads);
    Ok(Execution::Parallel)
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = execution_from_env()?;
    spqi::numerics::set_kernel_execution(exec);
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Grid(a) => grid(a, exec),
        Command::Analyze(a) => analyze(a),
        Command::Score(a) => score(a, exec),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(spqi::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes to `out`, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn json_report<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(spqi::Error::from)?;
    text.push('\n');
    Ok(text)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no such dataset directory")));
    }
    Ok(Dataset::read_dir(dir)?)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(r) = a.target_r {
        cfg.target_r = Some(r);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    let out = cfg.out_path()?.to_path_buf();
    if let Some(r) = cfg.target_r {
        cfg.synth = calibrate_signal(&cfg.synth, r)?;
    }
    let generated = generate_dataset(&cfg.synth)?;
    create_dir(&out)?;
    generated.write_dir(&out)?;
    cfg.echo(&out)?;
    let c = &generated.manifest.correlations;
    eprintln!(
        "{} questions, SPQ rate {:.3}, r(prior purchase, SPQ) = {:.3}",
        generated.manifest.n_questions, generated.manifest.spq_rate, c.r_prior_purchase_vs_spq
    );
    Ok(())
}

fn skipgram_for(ds: &Dataset, cfg: &RunConfig, cached: Option<&Path>) -> Result<BehavioralEmbeddings> {
    match cached {
        Some(p) => Checkpoint::load(p)?.to_embeddings(),
        None => {
            let events: Vec<_> = ds.purchases.events().copied().collect();
            Ok(train_skipgram(&events, &cfg.skipgram)?.embeddings)
        }
    }
}

/// Config echo stored inside checkpoints. Paths are dropped so the bytes do
/// not depend on where a run was launched.
fn portable(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        data: None,
        out: None,
        ..cfg.clone()
    }
}

fn seeds(cfg: &RunConfig) -> Seeds {
    Seeds {
        data: cfg.synth.seed,
        skipgram: cfg.skipgram.seed,
        train: cfg.train.seed,
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(s) = a.seed {
        cfg.skipgram.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_path()?.to_path_buf();
    let emb = skipgram_for(&ds, &cfg, None)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Checkpoint::from_embeddings(&emb, seeds(&cfg), portable(&cfg)).save(&out)
}

fn encoder(text_dim: usize, seed: u64) -> Result<HashedBagEncoder> {
    Ok(HashedBagEncoder::new(text_dim, seed)?)
}

#[derive(Debug, Serialize)]
struct History<'a> {
    variant: Variant,
    features: FeatureMask,
    best_epoch: usize,
    stopped_early: bool,
    epochs: &'a [EpochRecord],
}

fn train(a: TrainArgs, exec: Execution) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(f) = a.features {
        cfg.train.features = f;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    cfg.train.validate()?;
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_path()?.to_path_buf();
    let emb = skipgram_for(&ds, &cfg, a.embeddings.as_deref())?;
    let enc = encoder(cfg.train.model.text_dim, cfg.text_seed)?;
    let prep = Prepared::new(&ds, &emb, &enc, cfg.train.window_days)?;
    let run = train_multistage(&ds, &prep, &cfg.train, exec)?;
    let info = ModelInfo {
        variant: run.spec.variant,
        features: run.spec.mask,
        dims: run.spec.config.clone(),
        n_products: prep.index.n_products(),
        n_categories: prep.index.n_categories(),
        behavior_dim: emb.dim,
        text_seed: cfg.text_seed,
        best_epoch: run.best_epoch,
        stopped_early: run.stopped_early,
    };
    create_dir(&out)?;
    Checkpoint::from_model(&run.params, info, seeds(&cfg), portable(&cfg)).save(&out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join(HISTORY_FILE),
        &History {
            variant: run.spec.variant,
            features: run.spec.mask,
            best_epoch: run.best_epoch,
            stopped_early: run.stopped_early,
            epochs: &run.history,
        },
    )?;
    cfg.echo(&out)?;
    if let Some(best) = run.history.get(run.best_epoch.saturating_sub(1)) {
        eprintln!(
            "{} best epoch {} of {}: validation F1 {:.4}, loss {:.4}",
            run.spec.variant,
            run.best_epoch,
            run.history.len(),
            best.val_metrics.f1,
            best.val_loss
        );
    }
    Ok(())
}

/// A trained model bound to a dataset.
struct Loaded {
    ckpt: Checkpoint,
    spec: spqi::gat::ModelSpec,
    params: spqi::gat::SpqiParams,
}

fn load_model(path: &Path, ds: &Dataset) -> Result<(Loaded, CatalogIndex)> {
    let ckpt = Checkpoint::load(path)?;
    let index = CatalogIndex::new(&ds.catalog)?;
    let (spec, params) = ckpt.to_model(&index)?;
    Ok((Loaded { ckpt, spec, params }, index))
}

fn prepared_for(ds: &Dataset, m: &Loaded, index: CatalogIndex) -> Result<Prepared> {
    let info = m.ckpt.model_info()?;
    let enc = encoder(info.dims.text_dim, info.text_seed)?;
    Ok(Prepared::with_behavior(
        ds,
        index,
        m.params.behavior.clone(),
        &enc,
        m.ckpt.meta.config.train.window_days,
    )?)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    variant: Variant,
    features: FeatureMask,
    split: Split,
    n: usize,
    loss: f64,
    metrics: Metrics,
}

fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (m, index) = load_model(&a.checkpoint, &ds)?;
    let prep = prepared_for(&ds, &m, index)?;
    let e = evaluate(&ds, &prep, &m.params, &m.spec, a.split, &m.ckpt.meta.config.train, exec)?;
    let report = EvalReport {
        variant: m.spec.variant,
        features: m.spec.mask,
        split: a.split,
        n: e.nodes.len(),
        loss: e.loss,
        metrics: e.metrics,
    };
    emit(a.out.as_deref(), &json_report(&report)?)
}

/// Mean test F1 of one grid cell and its paired test against the
/// counterpart without graph layers.
#[derive(Debug, Serialize)]
pub struct CellSummary {
    pub variant: Variant,
    pub subset: Option<Subset>,
    pub mean_f1: f64,
    pub f1: Vec<f64>,
    pub versus: Option<Variant>,
    pub significance: Option<Significance>,
}

#[derive(Debug, Serialize)]
struct GridReport {
    seeds: Vec<u64>,
    records: Vec<GridRecord>,
    summary: Vec<CellSummary>,
}

/// Graph variants are compared to their MLP counterpart on the same subset.
fn counterpart(v: Variant) -> Option<Variant> {
    match v {
        Variant::SpqiMoe => Some(Variant::MlpMoe),
        Variant::SpqiConcat => Some(Variant::MlpConcat),
        _ => None,
    }
}

pub fn summarize(records: &[GridRecord]) -> Result<Vec<CellSummary>> {
    let mut cells: BTreeMap<(Variant, Option<Subset>), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells.entry((r.variant, r.subset)).or_default().push(r.f1);
    }
    let mut out = Vec::new();
    for (&(variant, subset), f1) in &cells {
        let versus = counterpart(variant);
        let significance = match versus.and_then(|v| cells.get(&(v, subset))) {
            Some(other) if f1.len() >= 5 && other.len() == f1.len() => Some(paired_significance(f1, other)?),
            _ => None,
        };
        out.push(CellSummary {
            variant,
            subset,
            mean_f1: f1.iter().sum::<f64>() / f1.len() as f64,
            f1: f1.clone(),
            versus,
            significance,
        });
    }
    Ok(out)
}

fn grid(a: GridArgs, exec: Execution) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(s) = a.seeds {
        cfg.grid_seeds = s;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if cfg.grid_seeds.is_empty() {
        return Err(CliError::Usage("grid needs at least one seed".into()));
    }
    cfg.train.validate()?;
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_path()?.to_path_buf();
    let emb = skipgram_for(&ds, &cfg, a.embeddings.as_deref())?;
    let enc = encoder(cfg.train.model.text_dim, cfg.text_seed)?;
    let prep = Prepared::new(&ds, &emb, &enc, cfg.train.window_days)?;
    let records = run_ablation_grid(&ds, &prep, &cfg.train, &cfg.grid_seeds, exec)?;
    let summary = summarize(&records)?;
    create_dir(&out)?;
    for s in &summary {
        let subset = s.subset.map_or("-".to_string(), |x| format!("{x:?}"));
        let p = s.significance.map_or(String::new(), |g| format!("  p={:.4} vs {}", g.p_value, s.versus.unwrap()));
        eprintln!("{:<13} {:<16} F1 {:.4}{p}", s.variant.name(), subset, s.mean_f1);
    }
    write_json(
        &out.join(GRID_FILE),
        &GridReport {
            seeds: cfg.grid_seeds.clone(),
            records,
            summary,
        },
    )?;
    cfg.echo(&out)
}

#[derive(Debug, Serialize)]
pub struct UserPair {
    pub r: f64,
    pub n: usize,
}

#[derive(Debug, Serialize)]
pub struct CategoryRate {
    pub category: CategoryId,
    pub n: usize,
    pub spq_rate: f64,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub windows: WindowCorrelations,
    /// Absent when too few users ask about two categories.
    pub user_pair: Option<UserPair>,
    pub categories: Vec<CategoryRate>,
    pub split_balance: BTreeMap<Split, (usize, usize)>,
}

pub fn analysis(ds: &Dataset) -> Result<AnalysisReport> {
    Ok(AnalysisReport {
        windows: purchase_window_correlations(ds)?,
        user_pair: user_pair_correlation(ds)?.map(|(r, n)| UserPair { r, n }),
        categories: category_spq_rates(ds)?
            .into_iter()
            .map(|(category, (n, spq_rate))| CategoryRate { category, n, spq_rate })
            .collect(),
        split_balance: [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .map(|s| (s, split_balance(ds, s)))
            .collect(),
    })
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    emit(a.out.as_deref(), &json_report(&analysis(&ds)?)?)
}

#[derive(Debug, Serialize)]
struct Scored {
    id: spqi::catalog::QuestionId,
    probability: f64,
    spq: bool,
}

fn read_questions(path: &Path) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(spqi::Error::Parse {
                    what: "question record",
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
        })
        .collect()
}

fn score(a: ScoreArgs, exec: Execution) -> Result<()> {
    let base = load_dataset(&a.data)?;
    let questions = read_questions(&a.question_file)?;
    if questions.is_empty() {
        return Err(CliError::Core(spqi::Error::Empty("question file")));
    }
    let ds = Dataset::new(base.catalog, base.purchases, questions)?;
    let (m, index) = load_model(&a.checkpoint, &ds)?;
    let prep = prepared_for(&ds, &m, index)?;
    let nodes: Vec<usize> = (0..ds.questions.len()).collect();
    // One graph over the whole scored set.
    let probs = predict(&ds, &prep, &m.params, &m.spec, &nodes, SamplingStrategy::Uniform, nodes.len(), exec)?;
    let mut text = String::new();
    for (q, p) in ds.questions.iter().zip(probs) {
        let line = serde_json::to_string(&Scored {
            id: q.id,
            probability: p,
            spq: p >= THRESHOLD,
        })
        .map_err(spqi::Error::from)?;
        text.push_str(&line);
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)
}
