//! The decision model: per-modality embedders plus a timestep table feed an
//! interleaved `(R̂, s, a)` token sequence through the shared backbone, and an
//! MLP head reads action predictions off the state positions. In language mode
//! the same backbone (with adapters) runs between the LM token embedding and
//! its tied output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionLayout, NodeId};
use crate::backbone::{lm_loss_graph, transformer_graph, TransformerConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{ActionKind, ContextWindow, StateNormalizer};
use crate::error::{LamoError, Result};
use crate::lora::{qkv_targets, trainable_param_count, AdaptMode, AdapterSet, FreezeMask, ParamReport, ADAPTER_PREFIX};
use crate::optim::ParamSource;
use crate::params::{Dropout, ParamBinder, WeightStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    /// `W¹·GELU(W⁰·x)`.
    #[default]
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepEncoding {
    #[default]
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Decision,
    Language,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: TransformerConfig,
    pub obs_dim: usize,
    /// Action vector width, or the number of actions when discrete.
    pub act_dim: usize,
    pub action_kind: ActionKind,
    /// Context length K in steps.
    pub context_len: usize,
    /// Size of the timestep table; episode steps must stay below it.
    pub max_timestep: usize,
    #[serde(default)]
    pub embed: EmbedKind,
    pub embed_hidden: usize,
    pub head_hidden: usize,
    /// Linear layers in the action head.
    pub head_layers: usize,
    #[serde(default)]
    pub timestep_encoding: TimestepEncoding,
    /// `false` drops the return-to-go tokens (behavior cloning).
    pub use_rtg: bool,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f32,
    /// Squash continuous predictions into `[-1, 1]`.
    pub tanh_actions: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_norm: Option<StateNormalizer>,
}

impl ModelConfig {
    pub fn new(backbone: TransformerConfig, obs_dim: usize, act_dim: usize, action_kind: ActionKind, context_len: usize) -> Self {
        let d = backbone.d_model;
        ModelConfig {
            backbone,
            obs_dim,
            act_dim,
            action_kind,
            context_len,
            max_timestep: 1024,
            embed: EmbedKind::Mlp,
            embed_hidden: d,
            head_hidden: d,
            head_layers: 3,
            timestep_encoding: TimestepEncoding::Learned,
            use_rtg: true,
            rtg_scale: 1.0,
            tanh_actions: action_kind == ActionKind::Continuous,
            state_norm: None,
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        if self.use_rtg {
            3
        } else {
            2
        }
    }

    /// Width of the action embedder input (one-hot for discrete actions).
    fn action_in(&self) -> usize {
        self.act_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |m: String| Err(LamoError::Config(m));
        if self.obs_dim == 0 || self.act_dim == 0 || self.context_len == 0 || self.max_timestep == 0 {
            return bad("obs_dim, act_dim, context_len and max_timestep must be positive".into());
        }
        if self.action_kind == ActionKind::Discrete && self.act_dim < 2 {
            return bad("discrete action spaces need at least 2 actions".into());
        }
        if self.context_len * self.tokens_per_step() > self.backbone.max_positions {
            return bad(format!(
                "context of {} steps needs {} tokens, backbone allows {}",
                self.context_len,
                self.context_len * self.tokens_per_step(),
                self.backbone.max_positions
            ));
        }
        if self.embed_hidden == 0 || self.head_hidden == 0 || self.head_layers == 0 {
            return bad("embedder and head sizes must be positive".into());
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return bad(format!("rtg_scale {} must be positive", self.rtg_scale));
        }
        if let Some(n) = &self.state_norm {
            if n.mean.len() != self.obs_dim || n.std.len() != self.obs_dim {
                return bad("state normalizer width differs from obs_dim".into());
            }
        }
        Ok(())
    }

    fn modalities(&self) -> Vec<(&'static str, usize)> {
        let mut m = Vec::with_capacity(3);
        if self.use_rtg {
            m.push(("rtg", 1));
        }
        m.push(("state", self.obs_dim));
        m.push(("action", self.action_in()));
        m
    }

    /// Shapes of the decision-only tensors (`embed.*`, `head.*`).
    pub fn task_tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.backbone.d_model;
        let mut out = Vec::new();
        for (name, input) in self.modalities() {
            match self.embed {
                EmbedKind::Mlp => {
                    out.push((format!("embed.{name}.fc0.weight"), vec![self.embed_hidden, input]));
                    out.push((format!("embed.{name}.fc1.weight"), vec![d, self.embed_hidden]));
                }
                EmbedKind::Linear => out.push((format!("embed.{name}.linear.weight"), vec![d, input])),
            }
        }
        if self.timestep_encoding == TimestepEncoding::Learned {
            out.push(("embed.timestep".into(), vec![self.max_timestep, d]));
        }
        out.push(("embed.ln.weight".into(), vec![d]));
        out.push(("embed.ln.bias".into(), vec![d]));
        for i in 0..self.head_layers {
            let input = if i == 0 { d } else { self.head_hidden };
            let output = if i + 1 == self.head_layers { self.act_dim } else { self.head_hidden };
            out.push((format!("head.fc{i}.weight"), vec![output, input]));
            out.push((format!("head.fc{i}.bias"), vec![output]));
        }
        out
    }
}

/// Seeded initial values for the decision-only tensors.
pub fn init_task_tensors(config: &ModelConfig, seed: u64) -> Result<WeightStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (name, shape) in config.task_tensor_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name == "embed.ln.weight" {
            Tensor::full(&shape, 1.0)
        } else if name == "embed.timestep" {
            Tensor::randn(&shape, 0.02, &mut rng)
        } else {
            Tensor::randn(&shape, 1.0 / (shape[1] as f64).sqrt(), &mut rng)
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Fixed sinusoidal timestep table `[max_t, d]`.
pub fn sinusoidal_table<F: Scalar>(max_t: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(max_t * d);
    for t in 0..max_t {
        for j in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = t as f64 * freq;
            data.push(F::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![max_t, d], data).expect("table shape")
}

/// Flattened, normalized inputs for a batch of equal-length windows.
#[derive(Debug, Clone)]
pub struct PreparedBatch<F: Scalar> {
    pub batch: usize,
    pub steps: usize,
    rtg: Vec<F>,
    states: Vec<F>,
    actions: Vec<F>,
    timesteps: Vec<usize>,
    pub pad_mask: Vec<bool>,
    /// Continuous targets, `batch*steps*act_dim` values.
    targets: Vec<F>,
    /// Discrete targets (action ids; 0 in padded slots).
    target_ids: Vec<usize>,
}

impl<F: Scalar> PreparedBatch<F> {
    pub fn new(config: &ModelConfig, windows: &[ContextWindow]) -> Result<Self> {
        let steps = windows.first().map_or(0, ContextWindow::len);
        if steps == 0 {
            return Err(LamoError::invalid("empty window batch"));
        }
        if windows.iter().any(|w| w.len() != steps) {
            return Err(LamoError::invalid("windows in a batch must share one length"));
        }
        if steps * config.tokens_per_step() > config.backbone.max_positions {
            return Err(LamoError::invalid(format!("window of {steps} steps exceeds the backbone's positions")));
        }
        let n = windows.len() * steps;
        let (s_dim, a_dim) = (config.obs_dim, config.act_dim);
        let mut p = PreparedBatch {
            batch: windows.len(),
            steps,
            rtg: Vec::with_capacity(n),
            states: Vec::with_capacity(n * s_dim),
            actions: Vec::with_capacity(n * a_dim),
            timesteps: Vec::with_capacity(n),
            pad_mask: Vec::with_capacity(n),
            targets: Vec::new(),
            target_ids: Vec::new(),
        };
        let inv_scale = 1.0 / config.rtg_scale;
        for w in windows {
            if w.rtg.len() != steps || w.states.len() != steps || w.actions.len() != steps || w.timesteps.len() != steps {
                return Err(LamoError::invalid("window sequences differ in length"));
            }
            for t in 0..steps {
                let pad = w.pad_mask[t];
                if w.states[t].len() != s_dim {
                    return Err(LamoError::invalid(format!("state width {} != {s_dim}", w.states[t].len())));
                }
                if w.timesteps[t] >= config.max_timestep {
                    return Err(LamoError::invalid(format!(
                        "timestep {} >= max_timestep {}",
                        w.timesteps[t], config.max_timestep
                    )));
                }
                p.pad_mask.push(pad);
                p.timesteps.push(w.timesteps[t]);
                p.rtg.push(F::from_f64_lossy(f64::from(w.rtg[t] * inv_scale)));
                let state = match (&config.state_norm, pad) {
                    (Some(norm), false) => norm.apply(&w.states[t]),
                    _ => w.states[t].clone(),
                };
                p.states.extend(state.iter().map(|&v| F::from_f64_lossy(f64::from(v))));
                match config.action_kind {
                    ActionKind::Continuous => {
                        if w.actions[t].len() != a_dim {
                            return Err(LamoError::invalid(format!("action width {} != {a_dim}", w.actions[t].len())));
                        }
                        let a = w.actions[t].iter().map(|&v| F::from_f64_lossy(f64::from(v)));
                        p.actions.extend(a.clone());
                        p.targets.extend(a);
                    }
                    ActionKind::Discrete => {
                        let id = match w.actions[t].as_slice() {
                            [v] if pad => v.max(0.0) as usize,
                            [v] if *v >= 0.0 && (*v as usize) < a_dim && v.fract() == 0.0 => *v as usize,
                            other => return Err(LamoError::invalid(format!("bad discrete action {other:?}"))),
                        };
                        let id = if pad { 0 } else { id };
                        let mut one_hot = vec![F::zero(); a_dim];
                        if !pad {
                            one_hot[id] = F::one();
                        }
                        p.actions.extend(one_hot);
                        p.target_ids.push(id);
                    }
                }
            }
        }
        Ok(p)
    }

    fn rows(&self) -> usize {
        self.batch * self.steps
    }
}

fn modality_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &ModelConfig,
    name: &str,
    input: Tensor<F>,
) -> Result<NodeId> {
    let x = b.graph.constant(input);
    match config.embed {
        EmbedKind::Mlp => {
            let w0 = b.get(&format!("embed.{name}.fc0.weight"))?;
            let h = b.graph.linear(x, w0, None);
            let h = b.graph.gelu(h);
            let w1 = b.get(&format!("embed.{name}.fc1.weight"))?;
            Ok(b.graph.linear(h, w1, None))
        }
        EmbedKind::Linear => {
            let w = b.get(&format!("embed.{name}.linear.weight"))?;
            Ok(b.graph.linear(x, w, None))
        }
    }
}

/// Token embeddings `[batch*steps*tokens_per_step, d_model]` in
/// `(R̂_t, s_t, a_t)` order, `ω(t)` added, padded slots zeroed.
pub fn embed_graph<F: Scalar>(b: &mut ParamBinder<'_, F>, config: &ModelConfig, p: &PreparedBatch<F>) -> Result<NodeId> {
    let n = p.rows();
    let table = match config.timestep_encoding {
        TimestepEncoding::Learned => b.get("embed.timestep")?,
        TimestepEncoding::Sinusoidal => {
            b.graph.constant(sinusoidal_table(config.max_timestep, config.backbone.d_model))
        }
    };
    let time = b.graph.embedding(table, p.timesteps.clone());
    let mut parts = Vec::with_capacity(3);
    for (name, width) in config.modalities() {
        let data = match name {
            "rtg" => p.rtg.clone(),
            "state" => p.states.clone(),
            _ => p.actions.clone(),
        };
        let e = modality_graph(b, config, name, Tensor::new(vec![n, width], data)?)?;
        parts.push(b.graph.add(e, time));
    }
    let tps = parts.len();
    let map = (0..n).flat_map(|r| (0..tps).map(move |m| (m, r))).collect();
    let seq = b.graph.gather_rows(parts, map);
    if p.pad_mask.iter().any(|&m| m) {
        let scales = p
            .pad_mask
            .iter()
            .flat_map(|&m| std::iter::repeat(if m { F::zero() } else { F::one() }).take(tps))
            .collect();
        Ok(b.graph.row_scale(seq, scales))
    } else {
        Ok(seq)
    }
}

/// Action predictions `[batch*steps, act_dim]`, read at each state token.
pub fn decision_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &ModelConfig,
    p: &PreparedBatch<F>,
    mut dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let tps = config.tokens_per_step();
    let x = embed_graph(b, config, p)?;
    let (g, bias) = (b.get("embed.ln.weight")?, b.get("embed.ln.bias")?);
    let x = b.graph.layer_norm(x, g, bias);
    let x = Dropout::apply(dropout.as_deref_mut(), &mut b.graph, x);
    let key_valid = p.pad_mask.iter().flat_map(|&m| std::iter::repeat(!m).take(tps)).collect();
    let layout = AttentionLayout {
        batch: p.batch,
        seq: p.steps * tps,
        heads: config.backbone.n_heads,
        key_valid: Some(key_valid),
    };
    let h = transformer_graph(b, &config.backbone, x, &layout, dropout)?;
    let state_slot = tps - 2;
    let map = (0..p.rows()).map(|r| (0, r * tps + state_slot)).collect();
    let mut y = b.graph.gather_rows(vec![h], map);
    for i in 0..config.head_layers {
        let (w, bias) = (b.get(&format!("head.fc{i}.weight"))?, b.get(&format!("head.fc{i}.bias"))?);
        y = b.graph.linear(y, w, Some(bias));
        if i + 1 < config.head_layers {
            y = b.graph.gelu(y);
        }
    }
    if config.action_kind == ActionKind::Continuous && config.tanh_actions {
        y = b.graph.tanh(y);
    }
    Ok(y)
}

fn step_weights<F: Scalar>(p: &PreparedBatch<F>) -> Result<Vec<F>> {
    for w in p.pad_mask.chunks(p.steps) {
        if w.iter().all(|&m| m) {
            return Err(LamoError::invalid("window has no unmasked step"));
        }
    }
    let inv_b = F::one() / F::from_usize(p.batch).expect("batch");
    Ok(p.pad_mask.iter().map(|&m| if m { F::zero() } else { inv_b }).collect())
}

/// Sum over unmasked steps, mean over the batch.
pub fn decision_loss_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &ModelConfig,
    p: &PreparedBatch<F>,
    predictions: NodeId,
) -> Result<NodeId> {
    let weights = step_weights(p)?;
    Ok(match config.action_kind {
        ActionKind::Continuous => b.graph.squared_error(predictions, p.targets.clone(), weights),
        ActionKind::Discrete => b.graph.cross_entropy(predictions, p.target_ids.clone(), weights),
    })
}

/// Loss nodes of one joint-objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct JointNodes {
    pub decision: NodeId,
    pub language: Option<NodeId>,
    pub total: NodeId,
}

/// `L_decision + λ·L_language`. The language branch is skipped entirely when
/// `λ = 0` or no language batch is given.
pub fn joint_loss_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &ModelConfig,
    p: &PreparedBatch<F>,
    language: Option<&[Vec<usize>]>,
    lambda: f64,
    mut dropout: Option<&mut Dropout>,
) -> Result<JointNodes> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(LamoError::invalid(format!("lambda {lambda} must be finite and >= 0")));
    }
    let pred = decision_graph(b, config, p, dropout.as_deref_mut())?;
    let decision = decision_loss_graph(b, config, p, pred)?;
    match language {
        Some(batch) if lambda > 0.0 => {
            let lang = lm_loss_graph(b, &config.backbone, batch, dropout)?;
            let scaled = b.graph.scale(lang, F::from_f64_lossy(lambda));
            let total = b.graph.add(decision, scaled);
            Ok(JointNodes { decision, language: Some(lang), total })
        }
        _ => Ok(JointNodes { decision, language: None, total: decision }),
    }
}

/// Continuous: `Σ_t ‖a_t − a′_t‖²` over unmasked steps; discrete:
/// cross-entropy over unmasked steps. Summed per window, averaged over
/// windows. `predictions` is `[B, K, A]` (logits when discrete); `targets`
/// holds `B*K` action vectors (a single id when discrete).
pub fn decision_loss<F: Scalar>(
    predictions: &Tensor<F>,
    targets: &[Vec<f32>],
    pad_mask: &[bool],
    action_kind: ActionKind,
) -> Result<f64> {
    let shape = predictions.shape();
    if shape.len() != 3 {
        return Err(LamoError::shape("predictions must be [B, K, A]"));
    }
    let (batch, steps, width) = (shape[0], shape[1], shape[2]);
    if targets.len() != batch * steps || pad_mask.len() != batch * steps {
        return Err(LamoError::shape("targets and pad mask must hold B*K entries"));
    }
    if batch == 0 || steps == 0 {
        return Err(LamoError::invalid("empty prediction batch"));
    }
    if pad_mask.chunks(steps).any(|w| w.iter().all(|&m| m)) {
        return Err(LamoError::invalid("window has no unmasked step"));
    }
    let mut total = 0.0f64;
    for (i, target) in targets.iter().enumerate() {
        if pad_mask[i] {
            continue;
        }
        let row = &predictions.data()[i * width..(i + 1) * width];
        match action_kind {
            ActionKind::Continuous => {
                if target.len() != width {
                    return Err(LamoError::shape("target width differs from prediction width"));
                }
                total += row.iter().zip(target).map(|(&p, &t)| (p.as_f64() - f64::from(t)).powi(2)).sum::<f64>();
            }
            ActionKind::Discrete => {
                let id = match target.as_slice() {
                    [v] if *v >= 0.0 && (*v as usize) < width => *v as usize,
                    other => return Err(LamoError::invalid(format!("bad discrete target {other:?}"))),
                };
                let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                total += z.ln() + max - row[id].as_f64();
            }
        }
    }
    Ok(total / batch as f64)
}

/// `decision + λ·language`.
pub fn joint_loss(decision: f64, language: f64, lambda: f64) -> Result<f64> {
    if decision.is_nan() || language.is_nan() || lambda.is_nan() {
        return Err(LamoError::Numeric(format!(
            "non-finite loss input: decision {decision}, language {language}, lambda {lambda}"
        )));
    }
    if lambda < 0.0 {
        return Err(LamoError::invalid(format!("lambda {lambda} must be >= 0")));
    }
    if lambda == 0.0 {
        return Ok(decision);
    }
    Ok(decision + lambda * language)
}

/// How a model's backbone is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptSpec {
    pub mode: AdaptMode,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl AdaptSpec {
    pub fn lora(rank: usize, seed: u64) -> Self {
        AdaptSpec { mode: AdaptMode::Lora, rank, alpha: rank as f64, seed }
    }
}

/// Backbone, adapters, decision-only tensors and a freeze mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LamoModel<F: Scalar = f32> {
    config: ModelConfig,
    adapt: AdaptSpec,
    pub weights: WeightStore<F>,
    pub adapters: AdapterSet<F>,
    pub mask: FreezeMask,
    mode: Mode,
}

impl LamoModel<f32> {
    /// Wraps `backbone` (blocks, `ln_f`, optionally `wte`/`wpe`) with freshly
    /// initialized embedders and head, seeded by `adapt.seed`.
    pub fn from_backbone(config: ModelConfig, backbone: WeightStore<f32>, adapt: AdaptSpec) -> Result<Self> {
        config.validate()?;
        let has_language = backbone.contains("wte");
        config.backbone.check_store(&backbone, has_language)?;
        if backbone.names().any(|n| n.starts_with("embed.") || n.starts_with("head.")) {
            return Err(LamoError::invalid("backbone store already holds decision tensors"));
        }
        let mut weights = backbone;
        weights.extend(init_task_tensors(&config, adapt.seed)?)?;
        let mut adapters = AdapterSet::new();
        if adapt.mode == AdaptMode::Lora {
            adapters.inject(&weights, &qkv_targets(config.backbone.n_layers), adapt.rank, adapt.alpha, adapt.seed ^ 0x5eed)?;
        }
        let adapter_names: Vec<String> = adapters.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mask = FreezeMask::for_mode(weights.names(), adapter_names, adapt.mode);
        Ok(LamoModel { config, adapt, weights, adapters, mask, mode: Mode::Decision })
    }

    /// Serializes weights, adapters and the model description.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.backbone.clone(), self.weights.clone());
        ck.adapters = self.adapters.clone();
        ck.model = Some(serde_json::json!({ "config": self.config, "adapt": self.adapt }));
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Desc {
            config: ModelConfig,
            adapt: AdaptSpec,
        }
        let desc: Desc = serde_json::from_value(
            ck.model.ok_or_else(|| LamoError::Config("checkpoint carries no decision model".into()))?,
        )?;
        desc.config.validate()?;
        if desc.config.backbone != ck.config {
            return Err(LamoError::Config("model and checkpoint backbone configs differ".into()));
        }
        for (name, shape) in desc.config.task_tensor_shapes() {
            if ck.weights.require(&name)?.shape() != shape.as_slice() {
                return Err(LamoError::shape(format!("{name} has an unexpected shape")));
            }
        }
        let adapter_names: Vec<String> = ck.adapters.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mask = FreezeMask::for_mode(ck.weights.names(), adapter_names, desc.adapt.mode);
        Ok(LamoModel {
            config: desc.config,
            adapt: desc.adapt,
            weights: ck.weights,
            adapters: ck.adapters,
            mask,
            mode: Mode::Decision,
        })
    }
}

impl<F: Scalar> LamoModel<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapt(&self) -> AdaptSpec {
        self.adapt
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches between decision and language projections; weights are untouched.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Replaces the state normalizer and return-to-go scale.
    pub fn set_input_scaling(&mut self, norm: Option<StateNormalizer>, rtg_scale: f32) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.state_norm = norm;
        cfg.rtg_scale = rtg_scale;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> LamoModel<G> {
        LamoModel {
            config: self.config.clone(),
            adapt: self.adapt,
            weights: self.weights.cast(),
            adapters: self.adapters.cast(),
            mask: self.mask.clone(),
            mode: self.mode,
        }
    }

    /// Binder whose trainable leaves follow the freeze mask.
    pub fn trainable_binder(&self) -> ParamBinder<'_, F> {
        ParamBinder::new(&self.weights, Some(&self.adapters), Some(&self.mask))
    }

    pub fn frozen_binder(&self) -> ParamBinder<'_, F> {
        ParamBinder::frozen(&self.weights, Some(&self.adapters))
    }

    fn require_mode(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(LamoError::Mode(format!("operation needs {mode:?} mode, model is in {:?}", self.mode)));
        }
        Ok(())
    }

    /// Token embeddings `[B, tokens_per_step*K, d_model]` before the input layer norm.
    pub fn embed_window(&self, windows: &[ContextWindow]) -> Result<Tensor<F>> {
        let p = PreparedBatch::new(&self.config, windows)?;
        let mut b = self.frozen_binder();
        let x = embed_graph(&mut b, &self.config, &p)?;
        let d = self.config.backbone.d_model;
        b.graph.value(x).clone().reshape(&[p.batch, p.steps * self.config.tokens_per_step(), d])
    }

    /// Predictions `[B, K, act_dim]`; logits when actions are discrete.
    pub fn predict_actions(&self, windows: &[ContextWindow]) -> Result<Tensor<F>> {
        self.require_mode(Mode::Decision)?;
        let p = PreparedBatch::new(&self.config, windows)?;
        let mut b = self.frozen_binder();
        let y = decision_graph(&mut b, &self.config, &p, None)?;
        b.graph.value(y).clone().reshape(&[p.batch, p.steps, self.config.act_dim])
    }

    /// Decision loss of the model's predictions on `windows`.
    pub fn window_loss(&self, windows: &[ContextWindow]) -> Result<f64> {
        let pred = self.predict_actions(windows)?;
        let targets: Vec<Vec<f32>> = windows.iter().flat_map(|w| w.actions.iter().cloned()).collect();
        let mask: Vec<bool> = windows.iter().flat_map(|w| w.pad_mask.iter().copied()).collect();
        decision_loss(&pred, &targets, &mask, self.config.action_kind)
    }

    /// Mean next-token cross-entropy through the adapted backbone.
    pub fn language_loss(&self, batch: &[Vec<usize>]) -> Result<f64> {
        self.require_mode(Mode::Language)?;
        if !self.weights.contains("wte") || !self.weights.contains("wpe") {
            return Err(LamoError::Config("language projections (wte/wpe) are not installed".into()));
        }
        let mut b = self.frozen_binder();
        let loss = lm_loss_graph(&mut b, &self.config.backbone, batch, None)?;
        Ok(b.graph.value(loss).data()[0].as_f64())
    }

    /// `(name, numel)` for every stored tensor and adapter tensor.
    pub fn inventory(&self) -> Vec<(String, usize)> {
        let mut inv: Vec<(String, usize)> = self.weights.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
        inv.extend(self.adapters.named_tensors().into_iter().map(|(n, t)| (n, t.numel())));
        inv
    }

    pub fn param_report(&self) -> ParamReport {
        let inv = self.inventory();
        trainable_param_count(inv.iter().map(|(n, c)| (n.as_str(), *c)), &self.mask)
    }

    /// Architecture, adaptation and scaling summary written beside checkpoints.
    pub fn model_card(&self) -> serde_json::Value {
        let report = self.param_report();
        serde_json::json!({
            "architecture": {
                "n_layers": self.config.backbone.n_layers,
                "n_heads": self.config.backbone.n_heads,
                "d_model": self.config.backbone.d_model,
                "context_len": self.config.context_len,
                "tokens_per_step": self.config.tokens_per_step(),
                "embed": self.config.embed,
                "timestep_encoding": self.config.timestep_encoding,
                "head_layers": self.config.head_layers,
            },
            "adapt": self.adapt,
            "rank": self.adapters.meta().map(|m| m.rank),
            "params": report,
        })
    }
}

impl ParamSource for LamoModel<f32> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        if name.starts_with(ADAPTER_PREFIX) {
            self.adapters.tensor_mut(name)
        } else {
            self.weights.get_mut(name)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_weights;

    fn tiny() -> ModelConfig {
        let bb = TransformerConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 7, max_positions: 12, dropout: 0.0 };
        let mut c = ModelConfig::new(bb, 2, 2, ActionKind::Continuous, 2);
        c.max_timestep = 10;
        c.embed_hidden = 6;
        c.head_hidden = 6;
        c
    }

    fn model(cfg: ModelConfig) -> LamoModel {
        let bb = init_weights(&cfg.backbone, 1, true).unwrap();
        LamoModel::from_backbone(cfg, bb, AdaptSpec::lora(2, 3)).unwrap()
    }

    fn window(t0: usize) -> ContextWindow {
        ContextWindow {
            rtg: vec![1.0, 0.5],
            states: vec![vec![0.3, -0.1], vec![0.2, 0.4]],
            actions: vec![vec![0.1, 0.2], vec![-0.3, 0.0]],
            timesteps: vec![t0, t0 + 1],
            pad_mask: vec![false, false],
        }
    }

    #[test]
    fn decision_loss_examples() {
        let pred = Tensor::<f64>::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let l = decision_loss(&pred, &[vec![1.0, 0.0]], &[false], ActionKind::Continuous).unwrap();
        assert_eq!(l, 1.0);
        let pred = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 0.0, 9.0, 9.0]).unwrap();
        let l = decision_loss(&pred, &[vec![0.0, 0.0], vec![0.0, 0.0]], &[false, true], ActionKind::Continuous).unwrap();
        assert_eq!(l, 0.0);
        assert!(decision_loss(&pred, &[vec![0.0, 0.0], vec![0.0, 0.0]], &[true, true], ActionKind::Continuous).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(2.0, 3.0, 0.0).unwrap(), 2.0);
        assert_eq!(joint_loss(2.0, 3.0, 1.0).unwrap(), 5.0);
        assert!((joint_loss(2.0, 3.0, 0.1).unwrap() - 2.3).abs() < 1e-15);
        assert!(matches!(joint_loss(f64::NAN, 1.0, 0.1), Err(LamoError::Numeric(_))));
    }

    #[test]
    fn zero_first_layer_leaves_timestep_embedding() {
        let mut m = model(tiny());
        for name in ["embed.rtg.fc0.weight", "embed.state.fc0.weight", "embed.action.fc0.weight"] {
            m.weights.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let e = m.embed_window(&[window(3)]).unwrap();
        let table = m.weights.get("embed.timestep").unwrap();
        for pos in 0..6 {
            let t = 3 + pos / 3;
            assert_eq!(&e.data()[pos * 8..(pos + 1) * 8], table.row(t));
        }
    }

    #[test]
    fn mode_gates_operations() {
        let mut m = model(tiny());
        let before = m.predict_actions(&[window(0)]).unwrap();
        assert!(matches!(m.language_loss(&[vec![1, 2, 3]]), Err(LamoError::Mode(_))));
        m.set_mode(Mode::Language);
        assert!(matches!(m.predict_actions(&[window(0)]), Err(LamoError::Mode(_))));
        assert!(m.language_loss(&[vec![1, 2, 3]]).unwrap().is_finite());
        m.set_mode(Mode::Decision);
        assert!(before.bitwise_eq(&m.predict_actions(&[window(0)]).unwrap()));
    }

    #[test]
    fn timestep_bound_checked() {
        let m = model(tiny());
        assert!(matches!(m.predict_actions(&[window(9)]), Err(LamoError::InvalidInput(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(tiny());
        let bytes = m.to_checkpoint().to_bytes().unwrap();
        let back = LamoModel::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
