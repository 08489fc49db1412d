//! Offline trajectory datasets: returns-to-go, context windows, downsampling,
//! score normalization and state statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LamoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Continuous,
    /// Actions are stored as a single-element vector holding the action id.
    Discrete,
}

/// Which rewards a return-to-go at step `k` sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RtgConvention {
    /// Rewards strictly after step `k`: `R̂_k = Σ_{i>k} r_i`.
    #[default]
    Exclusive,
    /// Rewards from step `k` on, as in the original decision transformer.
    Inclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub rewards: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| f64::from(r)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if t == 0 {
            return Err(LamoError::invalid("empty trajectory"));
        }
        if self.states.len() != t || self.actions.len() != t {
            return Err(LamoError::invalid(format!(
                "length mismatch: {} states, {} actions, {} rewards",
                self.states.len(),
                self.actions.len(),
                t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub obs_dim: usize,
    /// Action vector width; for discrete actions the number of actions.
    pub act_dim: usize,
    pub action_kind: ActionKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    /// Mean episode return measured while generating the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, meta: DatasetMeta) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(LamoError::invalid("dataset has no trajectories"));
        }
        let action_width = match meta.action_kind {
            ActionKind::Continuous => meta.act_dim,
            ActionKind::Discrete => 1,
        };
        for (i, traj) in trajectories.iter().enumerate() {
            traj.validate()?;
            if traj.states.iter().any(|s| s.len() != meta.obs_dim) {
                return Err(LamoError::invalid(format!("trajectory {i}: state dim != {}", meta.obs_dim)));
            }
            if traj.actions.iter().any(|a| a.len() != action_width) {
                return Err(LamoError::invalid(format!("trajectory {i}: action width != {action_width}")));
            }
            if meta.action_kind == ActionKind::Discrete
                && traj.actions.iter().any(|a| a[0] < 0.0 || a[0] as usize >= meta.act_dim || a[0].fract() != 0.0)
            {
                return Err(LamoError::invalid(format!("trajectory {i}: bad discrete action id")));
            }
        }
        Ok(Dataset { trajectories, meta })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn best_return(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::total_return).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_return(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::total_return).sum::<f64>() / self.len() as f64
    }

    /// Dataset with every reward replaced by `f(reward)`.
    pub fn map_rewards(&self, f: impl Fn(f32) -> f32) -> Dataset {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory { rewards: t.rewards.iter().map(|&r| f(r)).collect(), ..t.clone() })
            .collect();
        Dataset { trajectories, meta: self.meta.clone() }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, traj) in self.trajectories.iter().enumerate() {
            let line = JsonlRecord {
                states: traj.states.clone(),
                actions: traj.actions.clone(),
                rewards: traj.rewards.clone(),
                meta: Some(RecordMeta {
                    episode: Some(i),
                    episode_return: Some(traj.total_return()),
                    dataset: (i == 0).then(|| self.meta.clone()),
                }),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads JSON-lines. Dataset metadata comes from the first record that
    /// carries it; without any, dimensions are inferred and actions assumed
    /// continuous.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Dataset> {
        let mut trajectories = Vec::new();
        let mut meta = None;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)
                .map_err(|e| LamoError::invalid(format!("line {}: {e}", lineno + 1)))?;
            if meta.is_none() {
                meta = rec.meta.and_then(|m| m.dataset);
            }
            trajectories.push(Trajectory { states: rec.states, actions: rec.actions, rewards: rec.rewards });
        }
        let first = trajectories.first().ok_or_else(|| LamoError::invalid("no trajectories in file"))?;
        let meta = meta.unwrap_or_else(|| DatasetMeta {
            env: "unknown".into(),
            obs_dim: first.states.first().map_or(0, Vec::len),
            act_dim: first.actions.first().map_or(0, Vec::len),
            action_kind: ActionKind::Continuous,
            seed: 0,
            quality: None,
            mean_return: None,
        });
        Dataset::new(trajectories, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::read_jsonl(std::io::BufReader::new(file))
    }
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    episode: Option<usize>,
    #[serde(rename = "return", default, skip_serializing_if = "Option::is_none")]
    episode_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetMeta>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    states: Vec<Vec<f32>>,
    actions: Vec<Vec<f32>>,
    rewards: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<RecordMeta>,
}

pub fn compute_returns_to_go(traj: &Trajectory, convention: RtgConvention) -> Result<Vec<f32>> {
    if traj.rewards.is_empty() {
        return Err(LamoError::invalid("empty trajectory"));
    }
    let mut out = vec![0.0f32; traj.len()];
    let mut tail = 0.0f64;
    for k in (0..traj.len()).rev() {
        match convention {
            RtgConvention::Exclusive => {
                out[k] = tail as f32;
                tail += f64::from(traj.rewards[k]);
            }
            RtgConvention::Inclusive => {
                tail += f64::from(traj.rewards[k]);
                out[k] = tail as f32;
            }
        }
    }
    Ok(out)
}

/// `K` consecutive steps of one trajectory, left-padded with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub rtg: Vec<f32>,
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub timesteps: Vec<usize>,
    /// `true` marks a padded slot.
    pub pad_mask: Vec<bool>,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    /// Window over steps `[start, start+len)` of `traj`, padded on the left to `k`.
    pub fn from_trajectory(
        traj: &Trajectory,
        rtg: &[f32],
        start: usize,
        k: usize,
    ) -> ContextWindow {
        let len = k.min(traj.len() - start);
        let pad = k - len;
        let obs_dim = traj.states[0].len();
        let act_dim = traj.actions[0].len();
        let mut w = ContextWindow {
            rtg: vec![0.0; pad],
            states: vec![vec![0.0; obs_dim]; pad],
            actions: vec![vec![0.0; act_dim]; pad],
            timesteps: vec![0; pad],
            pad_mask: vec![true; pad],
        };
        for t in start..start + len {
            w.rtg.push(rtg[t]);
            w.states.push(traj.states[t].clone());
            w.actions.push(traj.actions[t].clone());
            w.timesteps.push(t);
            w.pad_mask.push(false);
        }
        w
    }
}

/// Seeded window sampler; one per worker.
pub struct WindowSampler<'a> {
    dataset: &'a Dataset,
    rtg: Vec<Vec<f32>>,
    k: usize,
    rng: ChaCha8Rng,
}

impl<'a> WindowSampler<'a> {
    pub fn new(dataset: &'a Dataset, k: usize, convention: RtgConvention, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(LamoError::invalid("context length K must be >= 1"));
        }
        let rtg = dataset
            .trajectories()
            .iter()
            .map(|t| compute_returns_to_go(t, convention))
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowSampler { dataset, rtg, k, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Uniform trajectory, then a uniform start in `0..=T-K` (0 when `T < K`).
    pub fn sample(&mut self) -> ContextWindow {
        let ti = self.rng.gen_range(0..self.dataset.len());
        let traj = &self.dataset.trajectories()[ti];
        let last_start = traj.len().saturating_sub(self.k);
        let start = self.rng.gen_range(0..=last_start);
        ContextWindow::from_trajectory(traj, &self.rtg[ti], start, self.k)
    }

    pub fn sample_batch(&mut self, batch: usize) -> Vec<ContextWindow> {
        (0..batch).map(|_| self.sample()).collect()
    }
}

pub fn sample_window(dataset: &Dataset, k: usize, rng_seed: u64) -> Result<ContextWindow> {
    let mut sampler = WindowSampler::new(dataset, k, RtgConvention::default(), rng_seed)?;
    Ok(sampler.sample())
}

/// Keeps `round(ratio·N)` whole trajectories (at least one), in original order.
pub fn downsample(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(LamoError::invalid(format!("downsample ratio {ratio} not in (0, 1]")));
    }
    let n = dataset.len();
    let keep = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    let trajectories = picked.into_iter().map(|i| dataset.trajectories[i].clone()).collect();
    Dataset::new(trajectories, dataset.meta.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationEntry {
    pub task: String,
    pub random_score: f64,
    pub expert_score: f64,
}

impl NormalizationEntry {
    pub fn new(task: impl Into<String>, random_score: f64, expert_score: f64) -> Result<Self> {
        let entry = NormalizationEntry { task: task.into(), random_score, expert_score };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.expert_score > self.random_score) {
            return Err(LamoError::InvalidEntry(format!(
                "{}: expert score {} must exceed random score {}",
                self.task, self.expert_score, self.random_score
            )));
        }
        Ok(())
    }
}

/// `100 · (raw − random) / (expert − random)`.
pub fn normalize_score(raw: f64, entry: &NormalizationEntry) -> Result<f64> {
    entry.validate()?;
    Ok((raw - entry.random_score) / (entry.expert_score - entry.random_score) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ScorePair {
    random: f64,
    expert: f64,
}

/// Task → (random, expert) reference scores, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationTable {
    entries: BTreeMap<String, ScorePair>,
}

impl Default for NormalizationTable {
    fn default() -> Self {
        let rows: [(&str, f64, f64); 8] = [
            ("Kitchen", 0.0, 4.0),
            ("Reacher2d", 0.0, 100.0),
            ("Hopper", -20.3, 3234.3),
            ("HalfCheetah", -280.2, 12135.0),
            ("Walker2d", 1.6, 4592.3),
            ("Breakout", 1.7, 31.8),
            ("Qbert", 163.9, 13455.0),
            ("Pong", -20.7, 9.3),
        ];
        let entries = rows
            .iter()
            .map(|&(task, random, expert)| (task.to_string(), ScorePair { random, expert }))
            .collect();
        NormalizationTable { entries }
    }
}

impl NormalizationTable {
    pub fn empty() -> Self {
        NormalizationTable { entries: BTreeMap::new() }
    }

    pub fn get(&self, task: &str) -> Option<NormalizationEntry> {
        self.entries.get(task).map(|p| NormalizationEntry {
            task: task.to_string(),
            random_score: p.random,
            expert_score: p.expert,
        })
    }

    pub fn insert(&mut self, entry: NormalizationEntry) -> Result<()> {
        entry.validate()?;
        self.entries
            .insert(entry.task, ScorePair { random: entry.random_score, expert: entry.expert_score });
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = NormalizationEntry> + '_ {
        self.entries.keys().filter_map(|k| self.get(k))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: NormalizationTable = serde_json::from_str(text)?;
        for e in table.entries() {
            e.validate()?;
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Per-dimension state statistics; `std` is floored at [`StateNormalizer::STD_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StateNormalizer {
    pub const STD_FLOOR: f32 = 1e-6;

    pub fn identity(dim: usize) -> Self {
        StateNormalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn apply(&self, state: &[f32]) -> Vec<f32> {
        state
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&s, (&m, &sd))| (s - m) / sd)
            .collect()
    }
}

pub fn state_normalizer(dataset: &Dataset) -> StateNormalizer {
    let dim = dataset.meta().obs_dim;
    let mut sum = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    let mut count = 0usize;
    for traj in dataset.trajectories() {
        for s in &traj.states {
            for (j, &v) in s.iter().enumerate() {
                sum[j] += f64::from(v);
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    for traj in dataset.trajectories() {
        for s in &traj.states {
            for (j, &v) in s.iter().enumerate() {
                let d = f64::from(v) - mean[j];
                sq[j] += d * d;
            }
        }
    }
    StateNormalizer {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: sq
            .iter()
            .map(|&s| ((s / count as f64).sqrt() as f32).max(StateNormalizer::STD_FLOOR))
            .collect(),
    }
}
