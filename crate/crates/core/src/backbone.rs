//! GPT-2 style causal transformer: configuration, initialization, forward
//! pass, language-model head and next-token pre-training.
//!
//! Weight names follow GPT-2 with the fused attention projection split into
//! `h.{i}.attn.{q,k,v}`. Linear weights are `[out, in]`; the output projection
//! is tied to the token embedding `wte`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionLayout, NodeId};
use crate::corpus::Corpus;
use crate::error::{LamoError, Result};
use crate::lora::{AdapterSet, FreezeMask};
use crate::optim::{AdamW, OptimConfig};
use crate::params::{Dropout, ParamBinder, WeightStore};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl TransformerConfig {
    /// 12 layers, 12 heads, width 768, GPT-2 vocabulary.
    pub fn gpt2_small() -> Self {
        TransformerConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            dropout: 0.1,
        }
    }

    /// Desk-scale byte-level model.
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_positions: 128,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(LamoError::Config("transformer dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LamoError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LamoError::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Shapes of the transformer blocks and final layer norm.
    pub fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = Vec::new();
        for i in 0..self.n_layers {
            let p = format!("h.{i}");
            out.push((format!("{p}.ln_1.weight"), vec![d]));
            out.push((format!("{p}.ln_1.bias"), vec![d]));
            for proj in ["q", "k", "v"] {
                out.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{proj}.bias"), vec![d]));
            }
            out.push((format!("{p}.attn.c_proj.weight"), vec![d, d]));
            out.push((format!("{p}.attn.c_proj.bias"), vec![d]));
            out.push((format!("{p}.ln_2.weight"), vec![d]));
            out.push((format!("{p}.ln_2.bias"), vec![d]));
            out.push((format!("{p}.mlp.c_fc.weight"), vec![f, d]));
            out.push((format!("{p}.mlp.c_fc.bias"), vec![f]));
            out.push((format!("{p}.mlp.c_proj.weight"), vec![d, f]));
            out.push((format!("{p}.mlp.c_proj.bias"), vec![d]));
        }
        out.push(("ln_f.weight".into(), vec![d]));
        out.push(("ln_f.bias".into(), vec![d]));
        out
    }

    /// Shapes of the token and position embeddings.
    pub fn language_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("wpe".into(), vec![self.max_positions, self.d_model]),
            ("wte".into(), vec![self.vocab_size, self.d_model]),
        ]
    }

    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut s = self.block_shapes();
        s.extend(self.language_shapes());
        s
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Checks that `weights` holds every block tensor with the expected shape.
    pub fn check_store<F: Scalar>(&self, weights: &WeightStore<F>, language: bool) -> Result<()> {
        let shapes = if language { self.tensor_shapes() } else { self.block_shapes() };
        for (name, shape) in shapes {
            let t = weights
                .get(&name)
                .ok_or_else(|| LamoError::shape(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(LamoError::shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn init_tensor(name: &str, shape: &[usize], n_layers: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else if name.contains(".ln_") || name.starts_with("ln_f") {
        Tensor::full(shape, 1.0)
    } else if name.ends_with("c_proj.weight") {
        // residual projections are scaled by depth
        Tensor::randn(shape, INIT_STD / (2.0 * n_layers.max(1) as f64).sqrt(), rng)
    } else {
        Tensor::randn(shape, INIT_STD, rng)
    }
}

/// GPT-2 initialization: normal(0, 0.02) matrices and embeddings, zero biases,
/// unit layer-norm gains.
pub fn init_weights(config: &TransformerConfig, seed: u64, with_language: bool) -> Result<WeightStore<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    let shapes = if with_language { config.tensor_shapes() } else { config.block_shapes() };
    for (name, shape) in shapes {
        let t = init_tensor(&name, &shape, config.n_layers, &mut rng);
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Transformer stack over `x` (`[batch*seq, d_model]`), ending in `ln_f`.
pub fn transformer_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &TransformerConfig,
    x: NodeId,
    layout: &AttentionLayout,
    mut dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let mut x = x;
    for i in 0..config.n_layers {
        let p = format!("h.{i}");
        let (g1, b1) = (b.get(&format!("{p}.ln_1.weight"))?, b.get(&format!("{p}.ln_1.bias"))?);
        let h = b.graph.layer_norm(x, g1, b1);
        let mut qkv = [h; 3];
        for (slot, proj) in qkv.iter_mut().zip(["q", "k", "v"]) {
            let w = b.get(&format!("{p}.attn.{proj}.weight"))?;
            let bias = b.get(&format!("{p}.attn.{proj}.bias"))?;
            *slot = b.graph.linear(h, w, Some(bias));
        }
        let att = b.graph.causal_attention(qkv[0], qkv[1], qkv[2], layout.clone());
        let (wo, bo) = (b.get(&format!("{p}.attn.c_proj.weight"))?, b.get(&format!("{p}.attn.c_proj.bias"))?);
        let att = b.graph.linear(att, wo, Some(bo));
        let att = Dropout::apply(dropout.as_deref_mut(), &mut b.graph, att);
        x = b.graph.add(x, att);

        let (g2, b2) = (b.get(&format!("{p}.ln_2.weight"))?, b.get(&format!("{p}.ln_2.bias"))?);
        let h = b.graph.layer_norm(x, g2, b2);
        let (wf, bf) = (b.get(&format!("{p}.mlp.c_fc.weight"))?, b.get(&format!("{p}.mlp.c_fc.bias"))?);
        let m = b.graph.linear(h, wf, Some(bf));
        let m = b.graph.gelu(m);
        let (wp, bp) = (b.get(&format!("{p}.mlp.c_proj.weight"))?, b.get(&format!("{p}.mlp.c_proj.bias"))?);
        let m = b.graph.linear(m, wp, Some(bp));
        let m = Dropout::apply(dropout.as_deref_mut(), &mut b.graph, m);
        x = b.graph.add(x, m);
    }
    let (gf, bf) = (b.get("ln_f.weight")?, b.get("ln_f.bias")?);
    Ok(b.graph.layer_norm(x, gf, bf))
}

/// `wte[token] + wpe[position]` for `batch` sequences of equal length.
pub fn token_embedding_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &TransformerConfig,
    sequences: &[&[usize]],
) -> Result<NodeId> {
    let seq = sequences.first().map_or(0, |s| s.len());
    if seq == 0 || sequences.iter().any(|s| s.len() != seq) {
        return Err(LamoError::invalid("token batch must hold equal, non-empty sequences"));
    }
    if seq > config.max_positions {
        return Err(LamoError::invalid(format!("sequence length {seq} exceeds max_positions")));
    }
    let ids: Vec<usize> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(LamoError::invalid(format!("token id {bad} >= vocab size {}", config.vocab_size)));
    }
    let wte = b.get("wte").map_err(|_| LamoError::Config("language projections (wte) missing".into()))?;
    let wpe = b.get("wpe").map_err(|_| LamoError::Config("language projections (wpe) missing".into()))?;
    let tok = b.graph.embedding(wte, ids);
    let positions = (0..sequences.len()).flat_map(|_| 0..seq).collect();
    let pos = b.graph.embedding(wpe, positions);
    Ok(b.graph.add(tok, pos))
}

/// Logits over the vocabulary via the tied output projection.
pub fn lm_head_graph<F: Scalar>(b: &mut ParamBinder<'_, F>, hidden: NodeId) -> Result<NodeId> {
    let wte = b.get("wte").map_err(|_| LamoError::Config("language projections (wte) missing".into()))?;
    Ok(b.graph.linear(hidden, wte, None))
}

/// Mean next-token cross-entropy over a batch of token sequences. Each
/// sequence supplies inputs `s[..n-1]` and targets `s[1..]`.
pub fn lm_loss_graph<F: Scalar>(
    b: &mut ParamBinder<'_, F>,
    config: &TransformerConfig,
    batch: &[Vec<usize>],
    mut dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let len = batch.first().map_or(0, Vec::len);
    if len < 2 || batch.iter().any(|s| s.len() != len) {
        return Err(LamoError::invalid("language batch needs equal sequences of length >= 2"));
    }
    if let Some(&bad) = batch.iter().flatten().find(|&&t| t >= config.vocab_size) {
        return Err(LamoError::invalid(format!("token id {bad} >= vocab size {}", config.vocab_size)));
    }
    let inputs: Vec<&[usize]> = batch.iter().map(|s| &s[..len - 1]).collect();
    let x = token_embedding_graph(b, config, &inputs)?;
    let x = Dropout::apply(dropout.as_deref_mut(), &mut b.graph, x);
    let layout = AttentionLayout { batch: batch.len(), seq: len - 1, heads: config.n_heads, key_valid: None };
    let h = transformer_graph(b, config, x, &layout, dropout)?;
    let logits = lm_head_graph(b, h)?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().copied()).collect();
    let n = targets.len();
    let w = F::one() / F::from_usize(n).expect("count");
    Ok(b.graph.cross_entropy(logits, targets, vec![w; n]))
}

/// Hidden states for `input_embeddings` (`[B, L, d_model]`), dropout off.
pub fn forward<F: Scalar>(
    weights: &WeightStore<F>,
    config: &TransformerConfig,
    input_embeddings: &Tensor<F>,
    key_valid: Option<&[bool]>,
) -> Result<Tensor<F>> {
    forward_adapted(weights, None, config, input_embeddings, key_valid)
}

pub fn forward_adapted<F: Scalar>(
    weights: &WeightStore<F>,
    adapters: Option<&AdapterSet<F>>,
    config: &TransformerConfig,
    input_embeddings: &Tensor<F>,
    key_valid: Option<&[bool]>,
) -> Result<Tensor<F>> {
    config.validate()?;
    let shape = input_embeddings.shape();
    if shape.len() != 3 || shape[2] != config.d_model {
        return Err(LamoError::shape(format!("input embeddings {shape:?} must be [B, L, {}]", config.d_model)));
    }
    let (batch, seq) = (shape[0], shape[1]);
    if seq > config.max_positions {
        return Err(LamoError::invalid(format!("sequence length {seq} exceeds max_positions {}", config.max_positions)));
    }
    if let Some(m) = key_valid {
        if m.len() != batch * seq {
            return Err(LamoError::shape("key mask length must be B*L"));
        }
    }
    let mut b = ParamBinder::frozen(weights, adapters);
    let x = b.graph.constant(input_embeddings.clone());
    let layout = AttentionLayout { batch, seq, heads: config.n_heads, key_valid: key_valid.map(<[bool]>::to_vec) };
    let h = transformer_graph(&mut b, config, x, &layout, None)?;
    b.graph.value(h).clone().reshape(shape)
}

/// Vocabulary logits for hidden states of shape `[..., d_model]`.
pub fn lm_logits<F: Scalar>(weights: &WeightStore<F>, hidden: &Tensor<F>) -> Result<Tensor<F>> {
    let wte = weights.get("wte").ok_or_else(|| LamoError::Config("wte missing".into()))?;
    if hidden.cols() != wte.cols() {
        return Err(LamoError::shape("hidden width does not match wte"));
    }
    let mut b = ParamBinder::frozen(weights, None);
    let h = b.graph.constant(hidden.clone());
    let logits = lm_head_graph(&mut b, h)?;
    let mut shape = hidden.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = wte.rows();
    b.graph.value(logits).clone().reshape(&shape)
}

/// Mean next-token cross-entropy of `batch` under the (optionally adapted) model.
pub fn lm_loss<F: Scalar>(
    weights: &WeightStore<F>,
    adapters: Option<&AdapterSet<F>>,
    config: &TransformerConfig,
    batch: &[Vec<usize>],
) -> Result<f64> {
    let mut b = ParamBinder::frozen(weights, adapters);
    let loss = lm_loss_graph(&mut b, config, batch, None)?;
    Ok(b.graph.value(loss).data()[0].as_f64())
}

/// Mean cross-entropy over consecutive non-overlapping chunks of a corpus.
pub fn corpus_loss(
    weights: &WeightStore<f32>,
    adapters: Option<&AdapterSet<f32>>,
    config: &TransformerConfig,
    corpus: &Corpus,
    seq_len: usize,
    max_chunks: usize,
) -> Result<f64> {
    let chunks = corpus.sequential_chunks(seq_len + 1, max_chunks);
    if chunks.is_empty() {
        return Err(LamoError::invalid("corpus shorter than one evaluation chunk"));
    }
    let mut total = 0.0;
    for group in chunks.chunks(16) {
        total += lm_loss(weights, adapters, config, group)? * group.len() as f64;
    }
    Ok(total / chunks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (and at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch_size: 16,
            seq_len: 64,
            optim: OptimConfig { lr: 1e-3, weight_decay: 0.01, grad_clip: Some(1.0), ..OptimConfig::default() },
            seed: 0,
            checkpoint_every: None,
        }
    }
}

pub struct PretrainOutcome {
    pub weights: WeightStore<f32>,
    /// Training loss at each step, in order.
    pub losses: Vec<f64>,
}

/// Minimizes next-token cross-entropy over random contiguous chunks.
/// `on_checkpoint(step, weights)` fires every `checkpoint_every` steps.
pub fn pretrain_lm(
    weights: WeightStore<f32>,
    config: &TransformerConfig,
    corpus: &Corpus,
    pc: &PretrainConfig,
    mut on_checkpoint: impl FnMut(usize, &WeightStore<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    config.check_store(&weights, true)?;
    if corpus.is_empty() {
        return Err(LamoError::invalid("empty corpus"));
    }
    if corpus.len() <= pc.seq_len + 1 {
        return Err(LamoError::invalid("corpus must be longer than the context length"));
    }
    if corpus.vocab_size() > config.vocab_size {
        return Err(LamoError::invalid("corpus vocabulary exceeds model vocabulary"));
    }
    let mut weights = weights;
    let mask = FreezeMask::all(weights.names().map(String::from), true);
    let mut opt = AdamW::new(pc.optim, pc.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut dropout = Dropout { p: config.dropout, rng: ChaCha8Rng::seed_from_u64(pc.seed ^ 0x5eed) };
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 1..=pc.steps {
        let batch: Vec<Vec<usize>> = (0..pc.batch_size).map(|_| corpus.random_chunk(pc.seq_len + 1, &mut rng)).collect();
        let grads = {
            let mut b = ParamBinder::new(&weights, None, Some(&mask));
            let loss = lm_loss_graph(&mut b, config, &batch, Some(&mut dropout))?;
            let value = b.graph.value(loss).data()[0];
            if !value.is_finite() {
                return Err(LamoError::Numeric(format!("language loss diverged at step {step}")));
            }
            losses.push(f64::from(value));
            b.graph.backward(loss);
            b.grads()
        };
        opt.step(&grads, &mut weights);
        if pc.checkpoint_every.is_some_and(|every| every > 0 && step % every == 0) {
            on_checkpoint(step, &weights)?;
        }
    }
    Ok(PretrainOutcome { weights, losses })
}

/// Per-tensor gradient map for the LM loss (used by gradient checks).
pub fn lm_gradients<F: Scalar>(
    weights: &WeightStore<F>,
    config: &TransformerConfig,
    batch: &[Vec<usize>],
) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
    let mask = FreezeMask::all(weights.names().map(String::from), true);
    let mut b = ParamBinder::new(weights, None, Some(&mask));
    let loss = lm_loss_graph(&mut b, config, batch, None)?;
    let value = b.graph.value(loss).data()[0].as_f64();
    b.graph.backward(loss);
    Ok((value, b.grads()))
}

/// Random tokens for smoke tests.
pub fn random_tokens(n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 11, max_positions: 16, dropout: 0.0 }
    }

    #[test]
    fn gpt2_small_parameter_count() {
        assert_eq!(TransformerConfig::gpt2_small().param_count(), 124_439_808);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_scheme() {
        let w = init_weights(&tiny(), 0, true).unwrap();
        assert!(w.get("h.0.attn.q.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(w.get("ln_f.weight").unwrap().data().iter().all(|&v| v == 1.0));
        let q = w.get("h.1.attn.q.weight").unwrap();
        let var = q.data().iter().map(|v| v * v).sum::<f32>() / q.numel() as f32;
        assert!((var.sqrt() - 0.02).abs() < 0.01);
        assert_eq!(w.param_count(), tiny().param_count());
    }

    #[test]
    fn zero_layers_is_final_layer_norm() {
        let cfg = TransformerConfig { n_layers: 0, ..tiny() };
        let w = init_weights(&cfg, 0, true).unwrap();
        let x = Tensor::<f64>::randn(&[1, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = forward(&w.cast::<f64>(), &cfg, &x, None).unwrap();
        for r in 0..3 {
            let row = &x.data()[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let expect = (row[j] - mean) / (var + 1e-5).sqrt();
                assert!((y.data()[r * 8 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = tiny();
        let w = init_weights(&cfg, 0, true).unwrap();
        assert!(forward(&w, &cfg, &Tensor::zeros(&[1, 3, 7]), None).is_err());
        assert!(forward(&w, &cfg, &Tensor::zeros(&[1, 17, 8]), None).is_err());
        assert!(forward(&w, &cfg, &Tensor::zeros(&[1, 3, 8]), Some(&[true])).is_err());
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let cfg = TransformerConfig { vocab_size: 4, ..tiny() };
        let mut w = init_weights(&cfg, 0, true).unwrap();
        w.replace("wte", Tensor::zeros(&[4, 8]));
        let loss = lm_loss(&w, None, &cfg, &[vec![0, 1, 2, 3, 0]]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
        assert!((loss - 1.3863).abs() < 1e-4);

        let cfg1 = TransformerConfig { vocab_size: 1, ..tiny() };
        let w1 = init_weights(&cfg1, 0, true).unwrap();
        assert_eq!(lm_loss(&w1, None, &cfg1, &[vec![0, 0, 0]]).unwrap(), 0.0);
    }

    #[test]
    fn lm_logits_shape() {
        let cfg = tiny();
        let w = init_weights(&cfg, 0, true).unwrap();
        let h = Tensor::zeros(&[2, 3, 8]);
        assert_eq!(lm_logits(&w, &h).unwrap().shape(), &[2, 3, 11]);
    }

    #[test]
    fn out_of_vocab_tokens_rejected() {
        let cfg = tiny();
        let w = init_weights(&cfg, 0, true).unwrap();
        assert!(lm_loss(&w, None, &cfg, &[vec![0, 11]]).is_err());
    }
}
