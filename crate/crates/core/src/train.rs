//! Optimization loop, return-conditioned rollout evaluation, metric logs and
//! aggregation.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::data::{normalize_score, ActionKind, ContextWindow, Dataset, NormalizationEntry, RtgConvention, WindowSampler};
use crate::envs::{make_env, Env};
use crate::error::{LamoError, Result};
use crate::model::{joint_loss_graph, LamoModel, Mode, PreparedBatch};
use crate::optim::{AdamW, OptimConfig};
use crate::params::Dropout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    #[serde(default = "defaults::eval_episodes")]
    pub eval_episodes: usize,
    /// Evaluation targets; empty means 1× and 2× the dataset's best return.
    #[serde(default)]
    pub target_rtgs: Vec<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "defaults::lang_batch")]
    pub lang_batch_size: usize,
    #[serde(default = "defaults::lang_seq")]
    pub lang_seq_len: usize,
    #[serde(default)]
    pub rtg_convention: RtgConvention,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::eval_seed")]
    pub eval_seed: u64,
}

mod defaults {
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn warmup_frac() -> f64 {
        0.1
    }
    pub fn grad_clip() -> Option<f64> {
        Some(0.25)
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn eval_episodes() -> usize {
        10
    }
    pub fn lang_batch() -> usize {
        4
    }
    pub fn lang_seq() -> usize {
        32
    }
    pub fn eval_seed() -> u64 {
        1000
    }
}

impl TrainConfig {
    /// Desk-scale protocol: 10K steps, evaluation every 250.
    pub fn desk_scale() -> Self {
        TrainConfig {
            lr: defaults::lr(),
            weight_decay: defaults::weight_decay(),
            warmup_frac: defaults::warmup_frac(),
            grad_clip: defaults::grad_clip(),
            batch_size: defaults::batch_size(),
            steps: 10_000,
            eval_interval: 250,
            eval_episodes: defaults::eval_episodes(),
            target_rtgs: Vec::new(),
            lambda: 0.0,
            lang_batch_size: defaults::lang_batch(),
            lang_seq_len: defaults::lang_seq(),
            rtg_convention: RtgConvention::Exclusive,
            seed: 0,
            eval_seed: defaults::eval_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LamoError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be > 0");
        }
        if self.batch_size == 0 || self.eval_episodes == 0 {
            return bad("batch_size and eval_episodes must be > 0");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if self.lambda > 0.0 && (self.lang_batch_size == 0 || self.lang_seq_len < 1) {
            return bad("language batches need a positive size and length");
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            grad_clip: self.grad_clip,
            ..OptimConfig::default()
        }
    }
}

/// Conditioning targets: the configured list, or 1× and 2× the best return
/// (for a negative best return, "2×" moves one magnitude toward zero).
pub fn target_rtgs(config: &TrainConfig, dataset: &Dataset) -> Vec<f64> {
    if !config.target_rtgs.is_empty() {
        return config.target_rtgs.clone();
    }
    let best = dataset.best_return();
    vec![best, best + best.abs()]
}

/// One evaluation of one target at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub target_rtg: f64,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub normalized: Option<f64>,
    /// Episodes cut off at the horizon.
    pub truncated: usize,
}

impl EvalEntry {
    /// Normalized score when available, raw mean otherwise.
    pub fn score(&self) -> f64 {
        self.normalized.unwrap_or(self.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub step: usize,
    pub entries: Vec<EvalEntry>,
}

impl CheckpointEval {
    /// Entry of the best-scoring target.
    pub fn best(&self) -> &EvalEntry {
        self.entries
            .iter()
            .max_by(|a, b| a.score().total_cmp(&b.score()))
            .expect("at least one target")
    }
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(episode as u64)
}

struct Episode {
    env: Box<dyn Env>,
    rtg: Vec<f32>,
    states: Vec<Vec<f32>>,
    actions: Vec<Vec<f32>>,
    total: f64,
    done: bool,
    truncated: bool,
}

fn context(ep: &Episode, k: usize, act_width: usize) -> ContextWindow {
    let t = ep.states.len();
    let start = t.saturating_sub(k);
    let pad = k - (t - start);
    let obs = ep.states[0].len();
    let mut w = ContextWindow {
        rtg: vec![0.0; pad],
        states: vec![vec![0.0; obs]; pad],
        actions: vec![vec![0.0; act_width]; pad],
        timesteps: vec![0; pad],
        pad_mask: vec![true; pad],
    };
    for i in start..t {
        w.rtg.push(ep.rtg[i]);
        w.states.push(ep.states[i].clone());
        // the current action is not known yet; causality keeps it unread
        w.actions.push(ep.actions.get(i).cloned().unwrap_or_else(|| vec![0.0; act_width]));
        w.timesteps.push(i);
        w.pad_mask.push(false);
    }
    w
}

/// Conditioning return for the next step after receiving `reward`.
pub fn next_conditioning(current: f32, reward: f32) -> f32 {
    current - reward
}

/// Greedy rollouts conditioned on `target_rtg`. The conditioning return is
/// decremented by each received reward; the context keeps the last K steps.
/// Episodes run in lockstep over one read-only model.
pub fn evaluate(
    model: &LamoModel,
    env_name: &str,
    target_rtg: f64,
    episodes: usize,
    seed: u64,
    normalization: Option<&NormalizationEntry>,
) -> Result<EvalEntry> {
    if episodes == 0 {
        return Err(LamoError::invalid("episodes must be >= 1"));
    }
    let cfg = model.config();
    if model.mode() != Mode::Decision {
        return Err(LamoError::Mode("evaluation needs decision mode".into()));
    }
    let probe = make_env(env_name)?;
    let spec = probe.spec();
    if spec.obs_dim != cfg.obs_dim || spec.act_dim != cfg.act_dim || spec.action_kind != cfg.action_kind {
        return Err(LamoError::shape(format!(
            "env {env_name} ({}→{} {:?}) does not match model ({}→{} {:?})",
            spec.obs_dim, spec.act_dim, spec.action_kind, cfg.obs_dim, cfg.act_dim, cfg.action_kind
        )));
    }
    if spec.horizon > cfg.max_timestep {
        return Err(LamoError::invalid(format!(
            "env horizon {} exceeds the model's timestep table {}",
            spec.horizon, cfg.max_timestep
        )));
    }
    let act_width = match cfg.action_kind {
        ActionKind::Continuous => cfg.act_dim,
        ActionKind::Discrete => 1,
    };
    let mut eps: Vec<Episode> = (0..episodes)
        .map(|i| {
            let mut env = make_env(env_name)?;
            let s0 = env.reset(episode_seed(seed, i));
            Ok(Episode {
                env,
                rtg: vec![target_rtg as f32],
                states: vec![s0],
                actions: Vec::new(),
                total: 0.0,
                done: false,
                truncated: false,
            })
        })
        .collect::<Result<_>>()?;
    let k = cfg.context_len;
    while eps.iter().any(|e| !e.done) {
        let active: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].done).collect();
        let windows: Vec<ContextWindow> = active.iter().map(|&i| context(&eps[i], k, act_width)).collect();
        let pred = model.predict_actions(&windows)?;
        let a_dim = cfg.act_dim;
        for (row, &i) in active.iter().enumerate() {
            let last = &pred.data()[(row * k + k - 1) * a_dim..(row * k + k) * a_dim];
            let action = match cfg.action_kind {
                ActionKind::Continuous => last.to_vec(),
                ActionKind::Discrete => {
                    let arg = last
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(j, _)| j)
                        .expect("non-empty logits");
                    vec![arg as f32]
                }
            };
            if action.iter().any(|v| !v.is_finite()) {
                return Err(LamoError::Numeric("non-finite action during evaluation".into()));
            }
            let ep = &mut eps[i];
            let step = ep.env.step(&action);
            ep.actions.push(action);
            ep.total += f64::from(step.reward);
            if step.done {
                ep.done = true;
                ep.truncated = step.truncated;
            } else {
                let next = next_conditioning(ep.rtg.last().copied().expect("rtg"), step.reward);
                ep.rtg.push(next);
                ep.states.push(step.state);
            }
        }
    }
    let returns: Vec<f64> = eps.iter().map(|e| e.total).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let normalized = normalization.map(|e| normalize_score(mean, e)).transpose()?;
    Ok(EvalEntry {
        target_rtg,
        truncated: eps.iter().filter(|e| e.truncated).count(),
        returns,
        mean,
        std,
        normalized,
    })
}

/// One row of `metrics.csv`. Losses are means over the steps since the
/// previous row; evaluation columns come from the best-scoring target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub decision_loss: f64,
    pub language_loss: Option<f64>,
    pub joint_loss: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_COLUMNS: [&str; 7] = [
    "step",
    "decision_loss",
    "language_loss",
    "joint_loss",
    "eval_return_mean",
    "eval_return_std",
    "normalized_score",
];

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        if self.rows.is_empty() {
            w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != METRICS_COLUMNS {
            return Err(LamoError::invalid(format!("unexpected metrics columns {headers:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>().map_err(csv_err)?;
        Ok(MetricsLog { rows })
    }

    /// `(step, normalized score)` of every evaluated row.
    pub fn scores(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.normalized_score.map(|s| (r.step, s))).collect()
    }
}

fn csv_err(e: csv::Error) -> LamoError {
    LamoError::invalid(format!("csv: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Aggregate {
    /// Mean over checkpoints in the final `fraction` of training steps.
    LastWindow { fraction: f64 },
    /// Mean of the `k` best checkpoint scores.
    TopK { k: usize },
}

impl Default for Aggregate {
    fn default() -> Self {
        Aggregate::LastWindow { fraction: 0.2 }
    }
}

/// Aggregates `(step, score)` checkpoint records.
pub fn aggregate(records: &[(usize, f64)], mode: Aggregate) -> Result<f64> {
    if records.is_empty() {
        return Err(LamoError::invalid("no checkpoint records to aggregate"));
    }
    match mode {
        Aggregate::LastWindow { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(LamoError::invalid(format!("window fraction {fraction} not in (0, 1]")));
            }
            let last = records.iter().map(|r| r.0).max().expect("non-empty");
            let cutoff = (1.0 - fraction) * last as f64;
            let window: Vec<f64> = records.iter().filter(|r| r.0 as f64 > cutoff).map(|r| r.1).collect();
            Ok(window.iter().sum::<f64>() / window.len() as f64)
        }
        Aggregate::TopK { k } => {
            if k == 0 || k > records.len() {
                return Err(LamoError::invalid(format!("top-k with k={k} over {} checkpoints", records.len())));
            }
            let mut scores: Vec<f64> = records.iter().map(|r| r.1).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            Ok(scores[..k].iter().sum::<f64>() / k as f64)
        }
    }
}

/// Per-step losses, kept alongside the interval-averaged log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub decision: f64,
    pub language: Option<f64>,
    pub joint: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LamoModel,
    pub log: MetricsLog,
    pub evals: Vec<CheckpointEval>,
    pub losses: Vec<StepLoss>,
}

/// What evaluation runs at each interval.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub env: String,
    pub targets: Vec<f64>,
    pub normalization: Option<NormalizationEntry>,
}

/// Called after each evaluation with the step and the current model.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &LamoModel) -> Result<()>;

/// Minimizes `L_decision + λ·L_language` with AdamW. Language batches are
/// drawn from `corpus` every step when `λ > 0`. Deterministic per seed.
pub fn train(
    mut model: LamoModel,
    dataset: &Dataset,
    corpus: Option<&Corpus>,
    config: &TrainConfig,
    eval: Option<&EvalSetup>,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = model.config().clone();
    let meta = dataset.meta();
    if meta.obs_dim != cfg.obs_dim || meta.act_dim != cfg.act_dim || meta.action_kind != cfg.action_kind {
        return Err(LamoError::shape("dataset dimensions do not match the model"));
    }
    let lang = if config.lambda > 0.0 {
        let corpus = corpus.ok_or_else(|| LamoError::Config("lambda > 0 needs a language corpus".into()))?;
        if !model.weights.contains("wte") {
            return Err(LamoError::Config("lambda > 0 needs language projections (wte/wpe)".into()));
        }
        if corpus.vocab_size() > cfg.backbone.vocab_size {
            return Err(LamoError::Config("corpus vocabulary exceeds the backbone's".into()));
        }
        if corpus.len() <= config.lang_seq_len + 1 || config.lang_seq_len + 1 > cfg.backbone.max_positions + 1 {
            return Err(LamoError::invalid("corpus shorter than one language chunk"));
        }
        Some(corpus)
    } else {
        None
    };
    if let Some(e) = eval {
        if e.targets.is_empty() {
            return Err(LamoError::Config("evaluation needs at least one target".into()));
        }
    }
    let mut sampler = WindowSampler::new(dataset, cfg.context_len, config.rtg_convention, config.seed)?;
    let mut lang_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1A96);
    let mut dropout = (cfg.backbone.dropout > 0.0)
        .then(|| Dropout { p: cfg.backbone.dropout, rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xD20) });
    let mut opt = AdamW::new(config.optim(), config.steps);
    let mut log = MetricsLog::default();
    let mut evals = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut since = (0.0f64, 0.0f64, 0.0f64, 0usize);

    for step in 1..=config.steps {
        let windows = sampler.sample_batch(config.batch_size);
        let prepared = PreparedBatch::<f32>::new(&cfg, &windows)?;
        let lang_batch: Option<Vec<Vec<usize>>> = lang.map(|c| {
            (0..config.lang_batch_size)
                .map(|_| c.random_chunk(config.lang_seq_len + 1, &mut lang_rng))
                .collect()
        });
        let (grads, loss) = {
            let mut b = model.trainable_binder();
            let nodes = joint_loss_graph(
                &mut b,
                &cfg,
                &prepared,
                lang_batch.as_deref(),
                config.lambda,
                dropout.as_mut(),
            )?;
            let decision = f64::from(b.graph.value(nodes.decision).data()[0]);
            let language = nodes.language.map(|n| f64::from(b.graph.value(n).data()[0]));
            let joint = f64::from(b.graph.value(nodes.total).data()[0]);
            if !joint.is_finite() {
                return Err(LamoError::Numeric(format!(
                    "loss diverged at step {step}: decision {decision}, language {language:?}, lr {}",
                    opt.current_lr()
                )));
            }
            b.graph.backward(nodes.total);
            (b.grads(), StepLoss { decision, language, joint })
        };
        opt.step(&grads, &mut model);
        losses.push(loss);
        since.0 += loss.decision;
        since.1 += loss.language.unwrap_or(0.0);
        since.2 += loss.joint;
        since.3 += 1;

        if step % config.eval_interval == 0 || step == config.steps {
            let n = since.3 as f64;
            let mut row = MetricsRow {
                step,
                decision_loss: since.0 / n,
                language_loss: lang.map(|_| since.1 / n),
                joint_loss: since.2 / n,
                eval_return_mean: None,
                eval_return_std: None,
                normalized_score: None,
            };
            since = (0.0, 0.0, 0.0, 0);
            if let Some(e) = eval {
                let entries = e
                    .targets
                    .iter()
                    .map(|&t| evaluate(&model, &e.env, t, config.eval_episodes, config.eval_seed, e.normalization.as_ref()))
                    .collect::<Result<Vec<_>>>()?;
                let ck = CheckpointEval { step, entries };
                let best = ck.best();
                row.eval_return_mean = Some(best.mean);
                row.eval_return_std = Some(best.std);
                row.normalized_score = best.normalized;
                evals.push(ck);
            }
            log.rows.push(row);
            if let Some(h) = hook.as_mut() {
                h(step, &model)?;
            }
        }
    }
    Ok(TrainOutcome { model, log, evals, losses })
}
