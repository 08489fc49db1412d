//! `lamo`: pre-train a backbone, generate offline data, fine-tune, evaluate,
//! report and run ablation presets.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 bad input data or
//! checkpoint, 4 numeric divergence.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lamo_core::backbone::{corpus_loss, init_weights, pretrain_lm, PretrainConfig, TransformerConfig};
use lamo_core::checkpoint::{load_checkpoint, Checkpoint};
use lamo_core::corpus::{shuffle_corpus, synthetic_text, Corpus};
use lamo_core::data::{downsample, Dataset};
use lamo_core::envs::{generate_dataset, make_env, reference_scores, ENV_NAMES};
use lamo_core::experiment::{
    build_model, mean_by_arm, run_ablation, write_comparison_csv, AblationContext, ComparisonRow, InitKind, ModelSpec,
    Preset, HELDOUT_CHUNKS, HELDOUT_SEQ,
};
use lamo_core::lora::AdaptMode;
use lamo_core::model::{EmbedKind, LamoModel};
use lamo_core::train::{aggregate, evaluate, target_rtgs, train, Aggregate, EvalSetup, MetricsLog, TrainConfig};
use lamo_core::{LamoError, Result, WeightStore};
use serde::{Deserialize, Serialize};

use manifest::{deterministic, ManifestBuilder};

const SYNTHETIC_BYTES: usize = 1_000_000;

#[derive(Parser)]
#[command(name = "lamo", version, about = "Language-model-initialized decision transformers for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a small causal language model on a text corpus.
    PretrainLm(PretrainArgs),
    /// Roll out a scripted behavior policy to produce an offline dataset.
    GenData(GenDataArgs),
    /// Fine-tune a decision model on an offline dataset.
    Train(TrainArgs),
    /// Evaluate a fine-tuned checkpoint with return-conditioned rollouts.
    Eval(EvalArgs),
    /// Aggregate checkpoint scores of finished runs.
    Report(ReportArgs),
    /// Run an ablation preset over data ratios and seeds.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Pretrained,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptArg {
    Lora,
    Full,
    Frozen,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedArg {
    Mlp,
    Linear,
}

#[derive(Args)]
struct PretrainArgs {
    /// UTF-8 text file; a seeded synthetic corpus is used when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Size of the synthetic corpus in bytes.
    #[arg(long, default_value_t = SYNTHETIC_BYTES)]
    synthetic_bytes: usize,
    /// Backbone architecture as JSON; defaults to the tiny byte-level config.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on a token-shuffled copy of the corpus.
    #[arg(long)]
    shuffle_corpus: bool,
    /// Fraction of the corpus held out for evaluation.
    #[arg(long, default_value_t = 0.05)]
    heldout_fraction: f64,
    #[arg(long)]
    print_config: bool,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    env: String,
    /// Probability of following the oracle within each behavior segment.
    #[arg(long, default_value_t = 0.5)]
    quality: f64,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by `train` and `ablate`; each overrides the JSON config.
#[derive(Args)]
struct RecipeArgs {
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long, value_enum)]
    adapt: Option<AdaptArg>,
    #[arg(long, value_enum)]
    embed: Option<EmbedArg>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Language text for the auxiliary loss; synthetic when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Offline dataset (JSON lines).
    #[arg(long, required_unless_present = "print_config")]
    dataset: Option<PathBuf>,
    /// Evaluation environment; defaults to the dataset's.
    #[arg(long)]
    env: Option<String>,
    /// Pre-trained backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Fraction of trajectories kept.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: String,
    /// Conditioning return; repeat for several.
    #[arg(long = "target", required = true)]
    targets: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregateArg {
    LastWindow,
    TopK,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories written by `train` or `ablate`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "last-window")]
    aggregate: AggregateArg,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 3)]
    k: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    /// One of the preset names, e.g. lamo_vs_dt.
    #[arg(long)]
    preset: String,
    #[arg(long, required_unless_present = "print_config")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    /// `NAME=PATH`, or a bare path for the `pretrained` backbone. Repeatable.
    #[arg(long = "backbone")]
    backbones: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 1.0])]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

/// Resolved `pretrain-lm` configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainRun {
    corpus: Option<PathBuf>,
    synthetic_bytes: usize,
    model: TransformerConfig,
    pretrain: PretrainConfig,
    shuffle_corpus: bool,
    heldout_fraction: f64,
}

/// JSON config accepted by `--config`: model spec and training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Recipe {
    #[serde(default)]
    model: ModelSpec,
    #[serde(default = "TrainConfig::desk_scale")]
    train: TrainConfig,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe { model: ModelSpec::default(), train: TrainConfig::desk_scale() }
    }
}

/// Resolved `train` configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRun {
    dataset: Option<PathBuf>,
    env: Option<String>,
    backbone: Option<PathBuf>,
    corpus: Option<PathBuf>,
    ratio: f64,
    #[serde(flatten)]
    recipe: Recipe,
}

/// Resolved `ablate` configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AblateRun {
    preset: Preset,
    dataset: Option<PathBuf>,
    env: Option<String>,
    backbones: BTreeMap<String, PathBuf>,
    corpus: Option<PathBuf>,
    ratios: Vec<f64>,
    seeds: Vec<u64>,
    jobs: usize,
    top_k: usize,
    lambda: f64,
    #[serde(flatten)]
    recipe: Recipe,
}

fn exit_code(e: &LamoError) -> u8 {
    match e {
        LamoError::Config(_) | LamoError::Mode(_) | LamoError::InvalidEntry(_) => 2,
        LamoError::Numeric(_) => 4,
        LamoError::InvalidInput(_)
        | LamoError::Shape(_)
        | LamoError::Checkpoint(_)
        | LamoError::Io(_)
        | LamoError::Json(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PretrainLm(a) => pretrain_cmd(a),
        Command::GenData(a) => gen_data_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LamoError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LamoError::Config(format!("{}: {e}", path.display())))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("ckpt"))?;
    Ok(())
}

fn load_corpus(path: Option<&Path>, synthetic_bytes: usize) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::from_file(p),
        None => Ok(Corpus::from_text(&synthetic_text(synthetic_bytes, 0))),
    }
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let model = match &a.model_config {
        Some(p) => read_json(p)?,
        None => TransformerConfig::tiny(lamo_core::corpus::BYTE_VOCAB),
    };
    let mut pretrain = PretrainConfig { batch_size: 8, seed: a.seed, ..PretrainConfig::default() };
    pretrain.steps = a.steps.unwrap_or(pretrain.steps);
    pretrain.batch_size = a.batch_size.unwrap_or(pretrain.batch_size);
    pretrain.seq_len = a.seq_len.unwrap_or(pretrain.seq_len);
    pretrain.optim.lr = a.lr.unwrap_or(pretrain.optim.lr);
    let run = PretrainRun {
        corpus: a.corpus.clone(),
        synthetic_bytes: a.synthetic_bytes,
        model,
        pretrain,
        shuffle_corpus: a.shuffle_corpus,
        heldout_fraction: a.heldout_fraction,
    };
    if a.print_config {
        return print_json(&run);
    }
    run.model.validate()?;
    if !(0.0..1.0).contains(&run.heldout_fraction) {
        return Err(LamoError::Config("heldout fraction must lie in [0, 1)".into()));
    }
    let out = a.out.expect("clap requires --out");
    prepare_out(&out)?;
    let mut manifest = ManifestBuilder::new("pretrain-lm", Some(run.pretrain.seed), &run)?;
    if let Some(p) = &run.corpus {
        manifest.input("corpus", p)?;
    }
    manifest.write(&out)?;
    let corpus = load_corpus(run.corpus.as_deref(), run.synthetic_bytes)?;
    let (train_text, heldout) = corpus.split(run.heldout_fraction);
    let train_text = if run.shuffle_corpus { shuffle_corpus(&train_text, run.pretrain.seed ^ 0x5F) } else { train_text };
    let init = init_weights(&run.model, run.pretrain.seed, true)?;
    let outcome = pretrain_lm(init, &run.model, &train_text, &run.pretrain, |_, _| Ok(()))?;

    let mut w = csv::Writer::from_path(out.join("metrics.csv")).map_err(|e| LamoError::invalid(e.to_string()))?;
    w.write_record(["step", "lm_loss"]).map_err(|e| LamoError::invalid(e.to_string()))?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(|e| LamoError::invalid(e.to_string()))?;
    }
    w.flush()?;
    let mut ck = Checkpoint::new(run.model.clone(), outcome.weights);
    ck.tokenizer = Some(corpus.tokenizer().clone());
    ck.save(&out.join("ckpt/backbone.lamo"))?;

    let heldout_loss = if heldout.len() > HELDOUT_SEQ {
        Some(corpus_loss(&ck.weights, None, &run.model, &heldout, HELDOUT_SEQ, HELDOUT_CHUNKS)?)
    } else {
        None
    };
    let results = serde_json::json!({
        "final_train_loss": outcome.losses.last(),
        "heldout_lm_loss": heldout_loss,
        "train_tokens": train_text.len(),
        "heldout_tokens": heldout.len(),
        "params": run.model.param_count(),
    });
    eprintln!("pre-training done: {results}");
    manifest.results(results);
    manifest.output(&out, "metrics.csv")?;
    manifest.output(&out, "ckpt/backbone.lamo")?;
    manifest.write(&out)?;
    Ok(())
}

fn gen_data_cmd(a: GenDataArgs) -> Result<()> {
    let mut env = make_env(&a.env).map_err(|_| {
        LamoError::Config(format!("unknown env {:?}; known: {}", a.env, ENV_NAMES.join(", ")))
    })?;
    let data = generate_dataset(env.as_mut(), a.quality, a.episodes, a.seed)?;
    data.save(&a.out)?;
    eprintln!(
        "{} episodes of {}: mean return {:.3}, best {:.3}",
        data.len(),
        a.env,
        data.mean_return(),
        data.best_return()
    );
    Ok(())
}

impl RecipeArgs {
    fn resolve(&self) -> Result<Recipe> {
        let mut r: Recipe = match &self.config {
            Some(p) => read_json(p)?,
            None => Recipe::default(),
        };
        let m = &mut r.model;
        if let Some(v) = self.rank {
            m.rank = v;
        }
        if let Some(v) = self.init {
            m.init = match v {
                InitArg::Pretrained => InitKind::Pretrained,
                InitArg::Random => InitKind::Random,
            };
        }
        if let Some(v) = self.adapt {
            m.adapt = match v {
                AdaptArg::Lora => AdaptMode::Lora,
                AdaptArg::Full => AdaptMode::Full,
                AdaptArg::Frozen => AdaptMode::Frozen,
            };
        }
        if let Some(v) = self.embed {
            m.embed = match v {
                EmbedArg::Mlp => EmbedKind::Mlp,
                EmbedArg::Linear => EmbedKind::Linear,
            };
        }
        if let Some(v) = self.context {
            m.context_len = v;
        }
        if self.dropout.is_some() {
            m.dropout = self.dropout;
        }
        let t = &mut r.train;
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.eval_interval {
            t.eval_interval = v;
        }
        if let Some(v) = self.eval_episodes {
            t.eval_episodes = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        Ok(r)
    }
}

fn load_backbone(path: &Path) -> Result<(WeightStore<f32>, TransformerConfig)> {
    load_checkpoint(path)
}

fn resolve_env(flag: Option<String>, dataset: &Dataset) -> String {
    flag.unwrap_or_else(|| dataset.meta().env.clone())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut recipe = a.recipe.resolve()?;
    if let Some(s) = a.seed {
        recipe.train.seed = s;
    }
    let run = TrainRun {
        dataset: a.dataset.clone(),
        env: a.env.clone(),
        backbone: a.backbone.clone(),
        corpus: a.recipe.corpus.clone(),
        ratio: a.ratio.unwrap_or(1.0),
        recipe,
    };
    if a.recipe.print_config {
        return print_json(&run);
    }
    run.recipe.train.validate()?;
    let out = a.out.expect("clap requires --out");
    let dataset_path = run.dataset.clone().expect("clap requires --dataset");
    prepare_out(&out)?;
    let mut manifest = ManifestBuilder::new("train", Some(run.recipe.train.seed), &run)?;
    manifest.input("dataset", &dataset_path)?;

    let full = Dataset::load(&dataset_path)?;
    let data = downsample(&full, run.ratio, run.recipe.train.seed)?;
    let env_name = resolve_env(run.env.clone(), &full);
    let horizon = make_env(&env_name)?.spec().horizon;
    let spec = &run.recipe.model;
    let (pretrained, backbone_cfg) = match (&run.backbone, spec.init) {
        (Some(p), _) => {
            manifest.input("backbone", p)?;
            let (w, c) = load_backbone(p)?;
            (Some(w), c)
        }
        (None, InitKind::Random) => (None, TransformerConfig::tiny(lamo_core::corpus::BYTE_VOCAB)),
        (None, InitKind::Pretrained) => {
            return Err(LamoError::Config("init=pretrained needs --backbone".into()));
        }
    };
    let pretrained = if spec.init == InitKind::Pretrained { pretrained } else { None };
    let model = build_model(spec, &backbone_cfg, pretrained.as_ref(), &data, horizon, run.recipe.train.seed)?;
    let corpus = if run.recipe.train.lambda > 0.0 {
        if let Some(p) = &run.corpus {
            manifest.input("corpus", p)?;
        }
        Some(load_corpus(run.corpus.as_deref(), SYNTHETIC_BYTES)?)
    } else {
        None
    };
    let eval = EvalSetup {
        env: env_name.clone(),
        targets: target_rtgs(&run.recipe.train, &data),
        normalization: Some(reference_scores(&env_name)?),
    };
    let report = model.param_report();
    eprintln!(
        "training on {} trajectories; {} of {} parameters trainable ({:.4}%)",
        data.len(),
        report.trainable,
        report.total,
        100.0 * report.fraction
    );

    manifest.write(&out)?;
    let ckpt_dir = out.join("ckpt");
    let mut saved = Vec::new();
    let mut hook = |step: usize, m: &LamoModel| -> Result<()> {
        let rel = format!("ckpt/step_{step:06}.lamo");
        m.to_checkpoint().save(&ckpt_dir.join(format!("step_{step:06}.lamo")))?;
        saved.push(rel);
        Ok(())
    };
    let outcome = train(model, &data, corpus.as_ref(), &run.recipe.train, Some(&eval), Some(&mut hook))?;

    let metrics = std::fs::File::create(out.join("metrics.csv"))?;
    outcome.log.write_csv(metrics)?;
    std::fs::write(out.join("evals.json"), serde_json::to_string_pretty(&outcome.evals)?)?;
    outcome.model.to_checkpoint().save(&out.join("ckpt/final.lamo"))?;
    std::fs::write(out.join("model_card.json"), serde_json::to_string_pretty(&outcome.model.model_card())?)?;

    let scores = outcome.log.scores();
    let results = serde_json::json!({
        "trajectories": data.len(),
        "env": env_name,
        "targets": eval.targets,
        "last_window": aggregate(&scores, Aggregate::default()).ok(),
        "top_3": aggregate(&scores, Aggregate::TopK { k: 3.min(scores.len().max(1)) }).ok(),
        "final_score": scores.last().map(|s| s.1),
        "trainable_params": report.trainable,
        "total_params": report.total,
    });
    eprintln!("done: {results}");
    manifest.results(results);
    for rel in ["metrics.csv", "evals.json", "model_card.json", "ckpt/final.lamo"] {
        manifest.output(&out, rel)?;
    }
    for rel in &saved {
        manifest.output(&out, rel)?;
    }
    manifest.write(&out)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = LamoModel::from_checkpoint(Checkpoint::load(&a.checkpoint)?)?;
    let norm = reference_scores(&a.env)?;
    let entries = a
        .targets
        .iter()
        .map(|&t| evaluate(&model, &a.env, t, a.episodes, a.seed, Some(&norm)))
        .collect::<Result<Vec<_>>>()?;
    print_json(&entries)
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    checkpoints: usize,
    score: f64,
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mode = match a.aggregate {
        AggregateArg::LastWindow => Aggregate::LastWindow { fraction: a.fraction },
        AggregateArg::TopK => Aggregate::TopK { k: a.k },
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| LamoError::invalid(e.to_string());
    for dir in &a.runs {
        let comparison = dir.join("comparison.csv");
        if comparison.exists() {
            let mut r = csv::Reader::from_path(&comparison).map_err(csv_err)?;
            let rows: Vec<ComparisonRow> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
            let field = match a.aggregate {
                AggregateArg::LastWindow => |r: &ComparisonRow| r.last_window,
                AggregateArg::TopK => |r: &ComparisonRow| r.top_k,
            };
            for ((ratio, arm), mean) in mean_by_arm(&rows, field) {
                let n = rows.iter().filter(|r| format!("{}", r.ratio) == ratio && r.arm == arm).count();
                w.serialize(ReportRow { run: format!("{}:{ratio}:{arm}", dir.display()), checkpoints: n, score: mean })
                    .map_err(csv_err)?;
            }
            continue;
        }
        let log = MetricsLog::read_csv(std::fs::File::open(dir.join("metrics.csv"))?)?;
        let scores = log.scores();
        w.serialize(ReportRow { run: dir.display().to_string(), checkpoints: scores.len(), score: aggregate(&scores, mode)? })
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| LamoError::invalid(e.to_string()))?;
    emit(&String::from_utf8_lossy(&bytes))
}

fn parse_backbones(specs: &[String]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for s in specs {
        let (name, path) = match s.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => ("pretrained".to_string(), PathBuf::from(s)),
        };
        if out.insert(name.clone(), path).is_some() {
            return Err(LamoError::Config(format!("backbone {name:?} given twice")));
        }
    }
    Ok(out)
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let recipe = a.recipe.resolve()?;
    let run = AblateRun {
        preset: Preset::parse(&a.preset)?,
        dataset: a.dataset.clone(),
        env: a.env.clone(),
        backbones: parse_backbones(&a.backbones)?,
        corpus: a.recipe.corpus.clone(),
        ratios: a.ratios.clone(),
        seeds: a.seeds.clone(),
        jobs: if deterministic() { 1 } else { a.jobs },
        top_k: a.top_k,
        lambda: recipe.train.lambda,
        recipe,
    };
    if a.recipe.print_config {
        return print_json(&run);
    }
    run.recipe.train.validate()?;
    let arms = run.preset.arms(&run.recipe.model, run.lambda);
    for arm in &arms {
        if let Some(key) = &arm.backbone {
            if !run.backbones.contains_key(key) {
                return Err(LamoError::Config(format!(
                    "preset {} needs --backbone {key}=PATH for arm {}",
                    run.preset.name(),
                    arm.name
                )));
            }
        }
    }
    let out = a.out.expect("clap requires --out");
    let dataset_path = run.dataset.clone().expect("clap requires --dataset");
    std::fs::create_dir_all(&out)?;
    let mut manifest = ManifestBuilder::new("ablate", None, &run)?;
    manifest.input("dataset", &dataset_path)?;
    let dataset = Dataset::load(&dataset_path)?;
    let env_name = resolve_env(run.env.clone(), &dataset);

    let mut backbones = BTreeMap::new();
    let mut backbone_config = None;
    for (name, path) in &run.backbones {
        manifest.input(&format!("backbone:{name}"), path)?;
        let (w, c) = load_backbone(path)?;
        if backbone_config.as_ref().is_some_and(|b| b != &c) {
            return Err(LamoError::Config("all backbones must share one architecture".into()));
        }
        backbone_config = Some(c);
        backbones.insert(name.clone(), w);
    }
    let backbone_config = backbone_config.unwrap_or_else(|| TransformerConfig::tiny(lamo_core::corpus::BYTE_VOCAB));
    let corpus = load_corpus(run.corpus.as_deref(), SYNTHETIC_BYTES)?;
    let (train_text, heldout) = corpus.split(0.05);
    if let Some(p) = &run.corpus {
        manifest.input("corpus", p)?;
    }
    let ctx = AblationContext {
        env: env_name,
        dataset: &dataset,
        corpus: Some(&train_text),
        heldout: Some(&heldout),
        backbones: &backbones,
        backbone_config,
        train: run.recipe.train.clone(),
        ratios: run.ratios.clone(),
        seeds: run.seeds.clone(),
        top_k: run.top_k,
    };
    manifest.write(&out)?;
    eprintln!("{} arms x {} ratios x {} seeds on {} threads", arms.len(), run.ratios.len(), run.seeds.len(), run.jobs);
    let rows = run_ablation(&ctx, &arms, run.jobs)?;
    write_comparison_csv(&rows, std::fs::File::create(out.join("comparison.csv"))?)?;
    let means: BTreeMap<String, f64> = mean_by_arm(&rows, |r| r.last_window)
        .into_iter()
        .map(|((ratio, arm), v)| (format!("{ratio}/{arm}"), v))
        .collect();
    manifest.results(serde_json::to_value(&means)?);
    manifest.output(&out, "comparison.csv")?;
    manifest.write(&out)?;
    let mut csv_out = Vec::new();
    write_comparison_csv(&rows, &mut csv_out)?;
    emit(&String::from_utf8_lossy(&csv_out))
}
