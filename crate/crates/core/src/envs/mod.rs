//! Toy environments, scripted behavior policies of tunable quality, dataset
//! generation and reference scores.

mod grid_quest;
mod lin_control;
mod point_reacher;

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionKind, Dataset, DatasetMeta, NormalizationEntry, Trajectory};
use crate::error::{LamoError, Result};

pub use grid_quest::GridQuest;
pub use lin_control::LinControl;
pub use point_reacher::PointReacher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    /// Action width, or the number of actions when discrete.
    pub act_dim: usize,
    pub action_kind: ActionKind,
    pub horizon: usize,
    pub reward_kind: RewardKind,
    /// Number of staged subgoals for multi-goal sparse tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgoals: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f32>,
    pub reward: f32,
    pub done: bool,
    /// The episode ended by reaching the horizon rather than by success.
    pub truncated: bool,
    /// The action was outside bounds and got clamped.
    pub clamped: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f32>;
    fn step(&mut self, action: &[f32]) -> Step;
    /// Scripted near-optimal action for the current state.
    fn oracle_action(&self) -> Vec<f32>;
    fn random_action(&self, rng: &mut ChaCha8Rng) -> Vec<f32>;
}

pub const ENV_NAMES: &[&str] = &["point-reacher", "point-reacher-dense", "lin-control", "grid-quest"];

pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "point-reacher" => Ok(Box::new(PointReacher::new(RewardKind::Sparse))),
        "point-reacher-dense" => Ok(Box::new(PointReacher::new(RewardKind::Dense))),
        "lin-control" => Ok(Box::new(LinControl::new())),
        "grid-quest" => Ok(Box::new(GridQuest::new())),
        _ => Err(LamoError::invalid(format!("unknown env {name:?}; known: {}", ENV_NAMES.join(", ")))),
    }
}

/// Scripted behavior of tunable quality. Episodes are cut into segments of
/// [`SEGMENT_STEPS`] steps; each segment follows the oracle with probability
/// `quality` and otherwise repeats one random action, so low-quality play
/// wanders instead of jittering in place.
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    pub quality: f64,
    rng: ChaCha8Rng,
    segment: Option<(Option<Vec<f32>>, usize)>,
}

pub const SEGMENT_STEPS: usize = 10;

impl BehaviorPolicy {
    pub fn new(quality: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(LamoError::invalid(format!("quality {quality} not in [0, 1]")));
        }
        Ok(BehaviorPolicy { quality, rng: ChaCha8Rng::seed_from_u64(seed), segment: None })
    }

    pub fn reset(&mut self) {
        self.segment = None;
    }

    pub fn act(&mut self, env: &dyn Env) -> Vec<f32> {
        let fresh = match &self.segment {
            Some((_, left)) => *left == 0,
            None => true,
        };
        if fresh {
            let oracle = self.quality >= 1.0 || (self.quality > 0.0 && self.rng.gen_bool(self.quality));
            let fixed = if oracle { None } else { Some(env.random_action(&mut self.rng)) };
            self.segment = Some((fixed, SEGMENT_STEPS));
        }
        let (fixed, left) = self.segment.as_mut().expect("segment set");
        *left -= 1;
        match fixed {
            Some(a) => a.clone(),
            None => env.oracle_action(),
        }
    }
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode as u64)
}

/// One episode; returns the trajectory and whether it hit the horizon.
pub fn rollout(env: &mut dyn Env, policy: &mut BehaviorPolicy, seed: u64) -> (Trajectory, bool) {
    let mut state = env.reset(seed);
    policy.reset();
    let mut traj = Trajectory { states: Vec::new(), actions: Vec::new(), rewards: Vec::new() };
    loop {
        let action = policy.act(env);
        let step = env.step(&action);
        traj.states.push(state);
        traj.actions.push(action);
        traj.rewards.push(step.reward);
        state = step.state;
        if step.done {
            return (traj, step.truncated);
        }
    }
}

/// Rolls out `episodes` episodes of `policy`; metadata records the env, the
/// quality knob, the seed and the measured mean return.
pub fn generate_dataset(env: &mut dyn Env, quality: f64, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(LamoError::invalid("episodes must be >= 1"));
    }
    let mut policy = BehaviorPolicy::new(quality, seed)?;
    let trajectories: Vec<Trajectory> = (0..episodes)
        .map(|i| rollout(env, &mut policy, episode_seed(seed, i)).0)
        .collect();
    let mean = trajectories.iter().map(Trajectory::total_return).sum::<f64>() / episodes as f64;
    let spec = env.spec();
    let meta = DatasetMeta {
        env: spec.name.clone(),
        obs_dim: spec.obs_dim,
        act_dim: spec.act_dim,
        action_kind: spec.action_kind,
        seed,
        quality: Some(quality),
        mean_return: Some(mean),
    };
    Dataset::new(trajectories, meta)
}

/// Mean return of `quality` over `episodes` episodes.
pub fn mean_policy_return(env: &mut dyn Env, quality: f64, episodes: usize, seed: u64) -> Result<f64> {
    Ok(generate_dataset(env, quality, episodes, seed)?.mean_return())
}

pub const REFERENCE_EPISODES: usize = 100;
const REFERENCE_SEED: u64 = 0x5C0_4E;

/// Random (quality 0) and oracle (quality 1) mean returns over 100 episodes,
/// computed once per env name.
pub fn reference_scores(env_name: &str) -> Result<NormalizationEntry> {
    static CACHE: OnceLock<Mutex<BTreeMap<String, NormalizationEntry>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(e) = cache.lock().expect("cache lock").get(env_name) {
        return Ok(e.clone());
    }
    let mut env = make_env(env_name)?;
    let random = mean_policy_return(env.as_mut(), 0.0, REFERENCE_EPISODES, REFERENCE_SEED)?;
    let expert = mean_policy_return(env.as_mut(), 1.0, REFERENCE_EPISODES, REFERENCE_SEED)?;
    let entry = NormalizationEntry::new(env_name, random, expert)?;
    cache.lock().expect("cache lock").insert(env_name.to_string(), entry.clone());
    Ok(entry)
}

pub(crate) fn clamp_unit(action: &[f32], width: usize) -> (Vec<f32>, bool) {
    let mut clamped = action.len() != width;
    let out = (0..width)
        .map(|i| {
            let v = action.get(i).copied().unwrap_or(0.0);
            let v = if v.is_nan() { 0.0 } else { v };
            let c = v.clamp(-1.0, 1.0);
            clamped |= c != v;
            c
        })
        .collect();
    (out, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_every_env() {
        for name in ENV_NAMES {
            let env = make_env(name).unwrap();
            assert_eq!(env.spec().name, *name);
            assert!(env.spec().horizon >= 1);
        }
        assert!(make_env("cartpole").is_err());
    }

    #[test]
    fn datasets_are_reproducible() {
        for name in ENV_NAMES {
            let mut env = make_env(name).unwrap();
            let a = generate_dataset(env.as_mut(), 0.5, 6, 11).unwrap();
            let b = generate_dataset(env.as_mut(), 0.5, 6, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 6);
            let mut bytes_a = Vec::new();
            let mut bytes_b = Vec::new();
            a.write_jsonl(&mut bytes_a).unwrap();
            b.write_jsonl(&mut bytes_b).unwrap();
            assert_eq!(bytes_a, bytes_b);
        }
    }

    #[test]
    fn clamp_flags() {
        assert_eq!(clamp_unit(&[0.5, -2.0], 2), (vec![0.5, -1.0], true));
        assert_eq!(clamp_unit(&[0.5, 0.0], 2), (vec![0.5, 0.0], false));
    }
}
