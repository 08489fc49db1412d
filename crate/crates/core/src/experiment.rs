//! Model construction from a declarative spec, the behavior-cloning
//! baseline, pre-training variants and matched-seed ablation presets.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbone::{corpus_loss, init_weights, pretrain_lm, PretrainConfig, TransformerConfig};
use crate::corpus::{shuffle_corpus, Corpus};
use crate::data::{downsample, state_normalizer, Dataset};
use crate::envs::{make_env, reference_scores};
use crate::error::{LamoError, Result};
use crate::lora::AdaptMode;
use crate::model::{AdaptSpec, EmbedKind, LamoModel, ModelConfig, TimestepEncoding};
use crate::params::WeightStore;
use crate::train::{aggregate, target_rtgs, train, Aggregate, EvalSetup, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Backbone weights from a language-model checkpoint.
    #[default]
    Pretrained,
    /// GPT-2-style random initialization.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub init: InitKind,
    #[serde(default)]
    pub adapt: AdaptMode,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// LoRA scale numerator; defaults to the rank so `α/r = 1`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub embed: EmbedKind,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default)]
    pub embed_hidden: Option<usize>,
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default = "default_head_layers")]
    pub head_layers: usize,
    #[serde(default)]
    pub timestep_encoding: TimestepEncoding,
    #[serde(default = "default_true")]
    pub use_rtg: bool,
    /// Overrides the backbone's dropout during fine-tuning.
    #[serde(default)]
    pub dropout: Option<f64>,
}

fn default_rank() -> usize {
    16
}
fn default_context() -> usize {
    20
}
fn default_head_layers() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            init: InitKind::Pretrained,
            adapt: AdaptMode::Lora,
            rank: default_rank(),
            alpha: None,
            embed: EmbedKind::Mlp,
            context_len: default_context(),
            embed_hidden: None,
            head_hidden: None,
            head_layers: default_head_layers(),
            timestep_encoding: TimestepEncoding::Learned,
            use_rtg: true,
            dropout: None,
        }
    }
}

impl ModelSpec {
    /// Pre-trained backbone, LoRA on Q/K/V, MLP embeddings and head.
    pub fn lamo(rank: usize, context_len: usize) -> Self {
        ModelSpec { rank, context_len, ..ModelSpec::default() }
    }

    /// Randomly initialized, fully trained, linear embeddings and head.
    pub fn scratch_dt(context_len: usize) -> Self {
        ModelSpec {
            init: InitKind::Random,
            adapt: AdaptMode::Full,
            embed: EmbedKind::Linear,
            head_layers: 1,
            context_len,
            ..ModelSpec::default()
        }
    }

    /// Scratch architecture without return-to-go tokens.
    pub fn behavior_cloning(context_len: usize) -> Self {
        ModelSpec { use_rtg: false, ..ModelSpec::scratch_dt(context_len) }
    }
}

/// Builds a model for `dataset` under `spec`. States are normalized with the
/// dataset statistics and returns-to-go divided by the largest episode-return
/// magnitude. `seed` drives the random backbone, task tensors and adapters.
pub fn build_model(
    spec: &ModelSpec,
    backbone: &TransformerConfig,
    pretrained: Option<&WeightStore<f32>>,
    dataset: &Dataset,
    horizon: usize,
    seed: u64,
) -> Result<LamoModel> {
    let mut backbone = backbone.clone();
    if let Some(p) = spec.dropout {
        backbone.dropout = p;
    }
    let weights = match spec.init {
        InitKind::Pretrained => {
            let w = pretrained.ok_or_else(|| LamoError::Config("init=pretrained needs a backbone checkpoint".into()))?;
            w.clone()
        }
        InitKind::Random => init_weights(&backbone, seed ^ 0xB0B, true)?,
    };
    let meta = dataset.meta();
    let mut cfg = ModelConfig::new(backbone.clone(), meta.obs_dim, meta.act_dim, meta.action_kind, spec.context_len);
    let longest = dataset.trajectories().iter().map(|t| t.len()).max().unwrap_or(1);
    cfg.max_timestep = horizon.max(longest);
    cfg.embed = spec.embed;
    cfg.embed_hidden = spec.embed_hidden.unwrap_or(backbone.d_model);
    cfg.head_hidden = spec.head_hidden.unwrap_or(backbone.d_model);
    cfg.head_layers = spec.head_layers;
    cfg.timestep_encoding = spec.timestep_encoding;
    cfg.use_rtg = spec.use_rtg;
    cfg.state_norm = Some(state_normalizer(dataset));
    let scale = dataset.trajectories().iter().map(|t| t.total_return().abs()).fold(0.0, f64::max);
    cfg.rtg_scale = if spec.use_rtg && scale > 0.0 { scale as f32 } else { 1.0 };
    let adapt = AdaptSpec { mode: spec.adapt, rank: spec.rank, alpha: spec.alpha.unwrap_or(spec.rank as f64), seed };
    LamoModel::from_backbone(cfg, weights, adapt)
}

/// Behavior cloning: the scratch architecture without return tokens,
/// trained on actions only. Evaluation (if any) uses a single dummy target.
pub fn train_bc_baseline(
    dataset: &Dataset,
    backbone: &TransformerConfig,
    config: &TrainConfig,
    context_len: usize,
    env: Option<&str>,
) -> Result<TrainOutcome> {
    let horizon = match env {
        Some(name) => make_env(name)?.spec().horizon,
        None => 1,
    };
    let model = build_model(&ModelSpec::behavior_cloning(context_len), backbone, None, dataset, horizon, config.seed)?;
    let cfg = TrainConfig { lambda: 0.0, ..config.clone() };
    let eval = env
        .map(|name| -> Result<EvalSetup> {
            Ok(EvalSetup { env: name.to_string(), targets: vec![0.0], normalization: Some(reference_scores(name)?) })
        })
        .transpose()?;
    train(model, dataset, None, &cfg, eval.as_ref(), None)
}

/// Full, early-stopped and shuffled-corpus language models from one config.
pub fn pretrain_variants(
    config: &TransformerConfig,
    corpus: &Corpus,
    pc: &PretrainConfig,
    early_steps: usize,
    init_seed: u64,
) -> Result<BTreeMap<String, WeightStore<f32>>> {
    if early_steps == 0 || early_steps > pc.steps {
        return Err(LamoError::Config(format!("early-stop step {early_steps} must lie in 1..={}", pc.steps)));
    }
    let init = init_weights(config, init_seed, true)?;
    let mut early = None;
    let mut full_pc = pc.clone();
    full_pc.checkpoint_every = Some(early_steps);
    let full = pretrain_lm(init.clone(), config, corpus, &full_pc, |step, w| {
        if step == early_steps {
            early = Some(w.clone());
        }
        Ok(())
    })?;
    let shuffled = pretrain_lm(init, config, &shuffle_corpus(corpus, pc.seed ^ 0x5F), pc, |_, _| Ok(()))?;
    let mut out = BTreeMap::new();
    out.insert("pretrained".to_string(), full.weights);
    out.insert("early-stopped".to_string(), early.expect("early checkpoint fires"));
    out.insert("shuffled".to_string(), shuffled.weights);
    Ok(out)
}

/// One arm of an ablation: a model spec, the backbone it starts from and λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub spec: ModelSpec,
    /// Key into [`AblationContext::backbones`]; `None` for random init.
    pub backbone: Option<String>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    MlpVsLinear,
    LoraVsFullVsFrozen,
    LambdaSweep,
    PretrainQuality,
    RandomInitLora,
    /// Pre-trained recipe against a from-scratch decision transformer.
    LamoVsDt,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::MlpVsLinear,
        Preset::LoraVsFullVsFrozen,
        Preset::LambdaSweep,
        Preset::PretrainQuality,
        Preset::RandomInitLora,
        Preset::LamoVsDt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MlpVsLinear => "mlp_vs_linear",
            Preset::LoraVsFullVsFrozen => "lora_vs_full_vs_frozen",
            Preset::LambdaSweep => "lambda_sweep",
            Preset::PretrainQuality => "pretrain_quality",
            Preset::RandomInitLora => "random_init_lora",
            Preset::LamoVsDt => "lamo_vs_dt",
        }
    }

    pub fn parse(name: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| LamoError::Config(format!("unknown preset {name:?}")))
    }

    /// Arms derived from the base recipe `base` (a LaMo spec) and its λ.
    pub fn arms(self, base: &ModelSpec, lambda: f64) -> Vec<Arm> {
        let lamo = |name: &str, spec: ModelSpec, backbone: Option<&str>, lambda: f64| Arm {
            name: name.to_string(),
            spec,
            backbone: backbone.map(String::from),
            lambda,
        };
        let random = ModelSpec { init: InitKind::Random, ..base.clone() };
        match self {
            Preset::MlpVsLinear => vec![
                lamo("mlp", base.clone(), Some("pretrained"), lambda),
                lamo("linear", ModelSpec { embed: EmbedKind::Linear, ..base.clone() }, Some("pretrained"), lambda),
            ],
            Preset::LoraVsFullVsFrozen => vec![
                lamo("lora", base.clone(), Some("pretrained"), lambda),
                lamo("full", ModelSpec { adapt: AdaptMode::Full, ..base.clone() }, Some("pretrained"), lambda),
                lamo("frozen", ModelSpec { adapt: AdaptMode::Frozen, ..base.clone() }, Some("pretrained"), lambda),
            ],
            Preset::LambdaSweep => [0.0, 0.1, 1.0]
                .iter()
                .map(|&l| lamo(&format!("lambda={l}"), base.clone(), Some("pretrained"), l))
                .collect(),
            Preset::PretrainQuality => vec![
                lamo("pretrained", base.clone(), Some("pretrained"), lambda),
                lamo("early-stopped", base.clone(), Some("early-stopped"), lambda),
                lamo("shuffled", base.clone(), Some("shuffled"), lambda),
                lamo("random-init", random, None, lambda),
            ],
            Preset::RandomInitLora => vec![
                lamo("pretrained-lora", base.clone(), Some("pretrained"), lambda),
                lamo("random-init-lora", random, None, lambda),
            ],
            Preset::LamoVsDt => vec![
                lamo("lamo", base.clone(), Some("pretrained"), lambda),
                lamo("dt", ModelSpec::scratch_dt(base.context_len), None, 0.0),
            ],
        }
    }
}

/// Shared inputs of an ablation run.
pub struct AblationContext<'a> {
    pub env: String,
    pub dataset: &'a Dataset,
    pub corpus: Option<&'a Corpus>,
    /// Held-out text for measuring language ability after fine-tuning.
    pub heldout: Option<&'a Corpus>,
    pub backbones: &'a BTreeMap<String, WeightStore<f32>>,
    pub backbone_config: TransformerConfig,
    pub train: TrainConfig,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub top_k: usize,
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub ratio: f64,
    pub arm: String,
    pub seed: u64,
    pub last_window: f64,
    pub top_k: f64,
    pub final_score: f64,
    pub heldout_lm_loss: Option<f64>,
}

pub const COMPARISON_COLUMNS: [&str; 8] =
    ["task", "ratio", "arm", "seed", "last_window", "top_k", "final_score", "heldout_lm_loss"];

/// Chunks and length used for held-out language evaluation.
pub const HELDOUT_SEQ: usize = 32;
pub const HELDOUT_CHUNKS: usize = 64;

/// Trains one arm on the seed's data subset and summarizes its scores.
pub fn run_arm(ctx: &AblationContext<'_>, arm: &Arm, ratio: f64, seed: u64) -> Result<ComparisonRow> {
    // paired design: every arm sees the same subset for a given seed
    let data = downsample(ctx.dataset, ratio, seed)?;
    let horizon = make_env(&ctx.env)?.spec().horizon;
    let pretrained = match &arm.backbone {
        Some(key) => Some(
            ctx.backbones
                .get(key)
                .ok_or_else(|| LamoError::Config(format!("arm {} needs backbone {key:?}", arm.name)))?,
        ),
        None => None,
    };
    let model = build_model(&arm.spec, &ctx.backbone_config, pretrained, &data, horizon, seed)?;
    let cfg = TrainConfig { lambda: arm.lambda, seed, ..ctx.train.clone() };
    let eval = EvalSetup {
        env: ctx.env.clone(),
        targets: target_rtgs(&cfg, &data),
        normalization: Some(reference_scores(&ctx.env)?),
    };
    let out = train(model, &data, ctx.corpus, &cfg, Some(&eval), None)?;
    let scores = out.log.scores();
    let heldout_lm_loss = match ctx.heldout {
        Some(h) if out.model.weights.contains("wte") => Some(corpus_loss(
            &out.model.weights,
            Some(&out.model.adapters),
            &ctx.backbone_config,
            h,
            HELDOUT_SEQ,
            HELDOUT_CHUNKS,
        )?),
        _ => None,
    };
    Ok(ComparisonRow {
        task: ctx.env.clone(),
        ratio,
        arm: arm.name.clone(),
        seed,
        last_window: aggregate(&scores, Aggregate::default())?,
        top_k: aggregate(&scores, Aggregate::TopK { k: ctx.top_k.min(scores.len()) })?,
        final_score: scores.last().map(|s| s.1).unwrap_or(f64::NAN),
        heldout_lm_loss,
    })
}

/// Runs every (ratio, arm, seed) combination on up to `jobs` threads. Rows
/// come back in a fixed order regardless of scheduling.
pub fn run_ablation(ctx: &AblationContext<'_>, arms: &[Arm], jobs: usize) -> Result<Vec<ComparisonRow>> {
    let mut work = Vec::new();
    for &ratio in &ctx.ratios {
        for arm in arms {
            for &seed in &ctx.seeds {
                work.push((ratio, arm, seed));
            }
        }
    }
    let results: Mutex<Vec<Option<Result<ComparisonRow>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(work.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(ratio, arm, seed)) = work.get(i) else { break };
                let r = run_arm(ctx, arm, ratio, seed);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(COMPARISON_COLUMNS).map_err(|e| LamoError::invalid(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| LamoError::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `field` over seeds for each `(ratio, arm)`.
pub fn mean_by_arm(rows: &[ComparisonRow], field: impl Fn(&ComparisonRow) -> f64) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((format!("{}", r.ratio), r.arm.clone())).or_default();
        e.0 += field(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_structure() {
        let base = ModelSpec::lamo(4, 5);
        assert_eq!(Preset::LoraVsFullVsFrozen.arms(&base, 0.1).len(), 3);
        let names: Vec<String> = Preset::PretrainQuality.arms(&base, 0.1).into_iter().map(|a| a.name).collect();
        assert_eq!(names, ["pretrained", "early-stopped", "shuffled", "random-init"]);
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn comparison_csv_header() {
        let mut buf = Vec::new();
        write_comparison_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), COMPARISON_COLUMNS.join(","));
    }
}
