//! Browser demo: roll out the point-reacher behavior policy, count LoRA
//! parameters for a GPT-2 shape, and normalize scores. Each export takes
//! plain numbers and returns a JSON string.

use lamo_core::backbone::TransformerConfig;
use lamo_core::data::{normalize_score, NormalizationEntry, NormalizationTable};
use lamo_core::envs::{make_env, reference_scores, BehaviorPolicy};
use lamo_core::lora::{planned_adapter_shapes, qkv_targets, trainable_param_count, AdaptMode, FreezeMask, ParamReport};
use lamo_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const REACHER: &str = "point-reacher";

#[derive(Debug, Clone, Serialize)]
pub struct Rollout {
    pub path: Vec<[f32; 2]>,
    pub goal: [f32; 2],
    pub rewards: Vec<f32>,
    pub total_return: f64,
    pub normalized: f64,
    pub reached: bool,
}

/// One point-reacher episode under the scripted policy of `quality`.
pub fn reacher_rollout(quality: f64, seed: u64) -> Result<Rollout> {
    let mut env = make_env(REACHER)?;
    let mut policy = BehaviorPolicy::new(quality, seed)?;
    let s0 = env.reset(seed);
    let goal = [s0[4], s0[5]];
    let mut path = vec![[s0[0], s0[1]]];
    let mut rewards = Vec::new();
    loop {
        let action = policy.act(env.as_ref());
        let step = env.step(&action);
        rewards.push(step.reward);
        path.push([step.state[0], step.state[1]]);
        if step.done {
            let total: f64 = rewards.iter().map(|&r| f64::from(r)).sum();
            return Ok(Rollout {
                path,
                goal,
                rewards,
                total_return: total,
                normalized: normalize_score(total, &reference_scores(REACHER)?)?,
                reached: !step.truncated,
            });
        }
    }
}

/// Trainable share when LoRA of `rank` adapts Q/K/V of every block.
pub fn lora_accounting(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, rank: usize) -> Result<ParamReport> {
    let cfg = TransformerConfig {
        n_layers,
        n_heads,
        d_model,
        d_ff: 4 * d_model,
        vocab_size,
        max_positions: 1024,
        dropout: 0.0,
    };
    cfg.validate()?;
    let shapes = cfg.tensor_shapes();
    let adapters = planned_adapter_shapes(&shapes, &qkv_targets(n_layers), rank)?;
    let inventory: Vec<(String, usize)> =
        shapes.iter().chain(&adapters).map(|(n, s)| (n.clone(), s.iter().product())).collect();
    let mask = FreezeMask::for_mode(
        shapes.iter().map(|(n, _)| n.as_str()),
        adapters.iter().map(|(n, _)| n.clone()),
        AdaptMode::Lora,
    );
    Ok(trainable_param_count(inventory.iter().map(|(n, c)| (n.as_str(), *c)), &mask))
}

#[derive(Debug, Clone, Serialize)]
pub struct Normalized {
    pub task: String,
    pub random: f64,
    pub expert: f64,
    pub raw: f64,
    pub normalized: f64,
}

/// Normalizes `raw` against a built-in task, or `point-reacher`.
pub fn normalize(task: &str, raw: f64) -> Result<Normalized> {
    let entry: NormalizationEntry = if task == REACHER {
        reference_scores(REACHER)?
    } else {
        NormalizationTable::default()
            .get(task)
            .ok_or_else(|| lamo_core::LamoError::invalid(format!("no reference scores for {task}")))?
    };
    Ok(Normalized {
        task: task.to_string(),
        random: entry.random_score,
        expert: entry.expert_score,
        raw,
        normalized: normalize_score(raw, &entry)?,
    })
}

/// Task names the normalizer knows.
pub fn tasks() -> Vec<String> {
    let mut names: Vec<String> = NormalizationTable::default().entries().map(|e| e.task).collect();
    names.push(REACHER.to_string());
    names
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = reacherRollout)]
pub fn reacher_rollout_js(quality: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(reacher_rollout(quality, u64::from(seed)))
}

#[wasm_bindgen(js_name = loraAccounting)]
pub fn lora_accounting_js(
    n_layers: u32,
    d_model: u32,
    n_heads: u32,
    vocab_size: u32,
    rank: u32,
) -> std::result::Result<String, JsError> {
    to_js(lora_accounting(n_layers as usize, d_model as usize, n_heads as usize, vocab_size as usize, rank as usize))
}

#[wasm_bindgen(js_name = normalizeScore)]
pub fn normalize_js(task: &str, raw: f64) -> std::result::Result<String, JsError> {
    to_js(normalize(task, raw))
}

#[wasm_bindgen(js_name = taskNames)]
pub fn tasks_js() -> std::result::Result<String, JsError> {
    to_js(Ok(tasks()))
}
