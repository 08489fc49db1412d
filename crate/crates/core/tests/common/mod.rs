//! Shared builders for the integration tests and the acceptance target.
#![allow(dead_code)]

use lamo_core::backbone::{init_weights, TransformerConfig};
use lamo_core::data::{ActionKind, ContextWindow, Dataset, DatasetMeta, Trajectory};
use lamo_core::model::{joint_loss_graph, AdaptSpec, LamoModel, ModelConfig, PreparedBatch};
use lamo_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn backbone(n_layers: usize, d_model: usize, vocab: usize) -> TransformerConfig {
    TransformerConfig {
        n_layers,
        n_heads: 4,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: vocab,
        max_positions: 48,
        dropout: 0.0,
    }
}

pub fn model_config(bb: TransformerConfig, obs: usize, act: usize, k: usize) -> ModelConfig {
    let mut c = ModelConfig::new(bb, obs, act, ActionKind::Continuous, k);
    c.max_timestep = 64;
    c
}

pub fn lora_model(cfg: ModelConfig, rank: usize, seed: u64) -> LamoModel {
    let bb = init_weights(&cfg.backbone, seed, true).unwrap();
    LamoModel::from_backbone(cfg, bb, AdaptSpec::lora(rank, seed + 1)).unwrap()
}

/// Fills every adapter `B` with small gaussian values so adapters act.
pub fn perturb_adapters(model: &mut LamoModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.adapters.named_tensors().into_iter().map(|(n, _)| n).collect();
    for n in names.iter().filter(|n| n.ends_with("/B")) {
        for v in model.adapters.tensor_mut(n).unwrap().data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
}

pub fn random_trajectory(rng: &mut impl Rng, len: usize, obs: usize, act: usize) -> Trajectory {
    Trajectory {
        states: (0..len).map(|_| (0..obs).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        actions: (0..len).map(|_| (0..act).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        rewards: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

pub fn meta(obs: usize, act: usize) -> DatasetMeta {
    DatasetMeta {
        env: "synthetic".into(),
        obs_dim: obs,
        act_dim: act,
        action_kind: ActionKind::Continuous,
        seed: 0,
        quality: None,
        mean_return: None,
    }
}

pub fn random_dataset(n: usize, len: usize, obs: usize, act: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::new((0..n).map(|_| random_trajectory(&mut rng, len, obs, act)).collect(), meta(obs, act)).unwrap()
}

/// Fully populated window with random content.
pub fn random_window(rng: &mut impl Rng, k: usize, obs: usize, act: usize, t0: usize) -> ContextWindow {
    ContextWindow {
        rtg: (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        states: (0..k).map(|_| (0..obs).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        actions: (0..k).map(|_| (0..act).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        timesteps: (t0..t0 + k).collect(),
        pad_mask: vec![false; k],
    }
}

/// Joint-loss value at the current parameters, in f64.
fn joint_value(m: &LamoModel<f64>, windows: &[ContextWindow], lang: &[Vec<usize>], lambda: f64) -> f64 {
    let p = PreparedBatch::new(m.config(), windows).unwrap();
    let mut b = m.frozen_binder();
    let nodes = joint_loss_graph(&mut b, m.config(), &p, Some(lang), lambda, None).unwrap();
    b.graph.value(nodes.total).data()[0]
}

fn param_mut<'a>(m: &'a mut LamoModel<f64>, name: &str) -> &'a mut Tensor<f64> {
    if name.starts_with("adapters/") {
        m.adapters.tensor_mut(name).unwrap()
    } else {
        m.weights.get_mut(name).unwrap()
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub groups: Vec<String>,
}

/// Central differences (h = 1e-5) against backprop on a 2-layer, d=32 model.
/// Relative error is `|g − ĝ| / max(|g|, |ĝ|, 1e-5)`.
pub fn gradient_check(coords: usize, seed: u64) -> GradReport {
    let mut m32 = lora_model(model_config(backbone(2, 32, 13), 3, 2, 4), 2, seed);
    perturb_adapters(&mut m32, seed + 1);
    let mut m: LamoModel<f64> = m32.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut windows: Vec<ContextWindow> = (0..3).map(|i| random_window(&mut rng, 4, 3, 2, i)).collect();
    windows[1].pad_mask[0] = true;
    let lang: Vec<Vec<usize>> = (0..2).map(|_| (0..7).map(|_| rng.gen_range(0..13)).collect()).collect();
    let lambda = 0.5;

    let p = PreparedBatch::new(m.config(), &windows).unwrap();
    let grads = {
        let mut b = m.trainable_binder();
        let nodes = joint_loss_graph(&mut b, m.config(), &p, Some(&lang), lambda, None).unwrap();
        b.graph.backward(nodes.total);
        b.grads()
    };
    let names: Vec<String> = grads.keys().cloned().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut groups = Vec::new();
    for c in 0..coords {
        let name = &names[c % names.len()];
        let idx = rng.gen_range(0..grads[name].numel());
        let orig = param_mut(&mut m, name).data()[idx];
        param_mut(&mut m, name).data_mut()[idx] = orig + h;
        let up = joint_value(&m, &windows, &lang, lambda);
        param_mut(&mut m, name).data_mut()[idx] = orig - h;
        let down = joint_value(&m, &windows, &lang, lambda);
        param_mut(&mut m, name).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[name].data()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
        groups.push(name.clone());
    }
    groups.sort();
    groups.dedup();
    GradReport { coords, max_rel_err: worst, groups }
}

/// Fresh LoRA model versus the same seeds without adapters: predictions and
/// backbone forward must agree bitwise.
pub fn zero_init_transparent(seed: u64) -> bool {
    use lamo_core::backbone::{forward, forward_adapted};
    let cfg = model_config(backbone(2, 32, 13), 3, 2, 5);
    let bb = init_weights(&cfg.backbone, seed, true).unwrap();
    let lora = LamoModel::from_backbone(cfg.clone(), bb.clone(), AdaptSpec::lora(4, seed)).unwrap();
    let plain = LamoModel::from_backbone(
        cfg.clone(),
        bb.clone(),
        AdaptSpec { mode: lamo_core::lora::AdaptMode::Frozen, ..AdaptSpec::lora(4, seed) },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let windows: Vec<ContextWindow> = (0..4).map(|i| random_window(&mut rng, 5, 3, 2, i)).collect();
    let same_pred = lora.predict_actions(&windows).unwrap().bitwise_eq(&plain.predict_actions(&windows).unwrap());
    let x = Tensor::<f32>::randn(&[2, 9, 32], 1.0, &mut rng);
    let adapted = forward_adapted(&lora.weights, Some(&lora.adapters), &cfg.backbone, &x, None).unwrap();
    same_pred && adapted.bitwise_eq(&forward(&bb, &cfg.backbone, &x, None).unwrap())
}

/// Worst `‖adapted − merged‖∞ / ‖adapted‖∞` over random inputs, with
/// trained-looking (nonzero) adapters.
pub fn merge_max_rel_err(inputs: usize, seed: u64) -> f64 {
    use lamo_core::backbone::{forward, forward_adapted};
    use lamo_core::lora::{inject, merge, qkv_targets};
    let cfg = backbone(2, 32, 13);
    let w = init_weights(&cfg, seed, false).unwrap();
    let (mut set, _) = inject(&w, &qkv_targets(2), 4, 8.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let names: Vec<String> = set.named_tensors().into_iter().map(|(n, _)| n).collect();
    for n in names {
        for v in set.tensor_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let merged = merge(&w, &set).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = Tensor::<f32>::randn(&[1, 12, 32], 1.0, &mut rng);
        let a = forward_adapted(&w, Some(&set), &cfg, &x, None).unwrap();
        let m = forward(&merged, &cfg, &x, None).unwrap();
        let scale = a.data().iter().fold(0.0f64, |acc, &v| acc.max(f64::from(v).abs()));
        worst = worst.max(a.max_abs_diff(&m) / scale);
    }
    worst
}

pub struct FreezeOutcome {
    pub frozen_identical: bool,
    pub frozen_count: usize,
    pub adapters_moved: bool,
    pub task_moved: bool,
}

/// Trains a LoRA model for `steps` optimizer steps and compares every tensor
/// with its value before training.
pub fn freeze_invariance(steps: usize) -> FreezeOutcome {
    use lamo_core::train::{train, TrainConfig};
    let cfg = model_config(backbone(2, 16, 11), 3, 2, 4);
    let before = lora_model(cfg, 2, 4);
    let data = random_dataset(6, 12, 3, 2, 1);
    let tc = TrainConfig { steps, eval_interval: steps, batch_size: 4, lr: 1e-3, ..TrainConfig::desk_scale() };
    let after = train(before.clone(), &data, None, &tc, None, None).unwrap().model;
    let mut frozen_identical = true;
    let mut frozen_count = 0;
    let mut task_moved = true;
    for (name, t) in before.weights.iter() {
        let same = t.bitwise_eq(after.weights.get(name).unwrap());
        if before.mask.is_trainable(name) {
            task_moved &= !same;
        } else {
            frozen_count += 1;
            frozen_identical &= same;
        }
    }
    let adapters_moved = before
        .adapters
        .named_tensors()
        .into_iter()
        .zip(after.adapters.named_tensors())
        .all(|((_, a), (_, b))| !a.bitwise_eq(b));
    FreezeOutcome { frozen_identical, frozen_count, adapters_moved, task_moved }
}
