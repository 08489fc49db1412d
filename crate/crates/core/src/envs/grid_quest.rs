use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, RewardKind, Step};
use crate::data::ActionKind;

pub const SIZE: i32 = 8;
pub const ITEMS: usize = 3;
const HORIZON: usize = 100;
/// up, down, left, right
const MOVES: [(i32, i32); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

/// 8×8 grid with three items that pay 1 each when collected in order.
///
/// State is `[ax, ay, i0x, i0y, i1x, i1y, i2x, i2y, progress]`, coordinates
/// scaled to `[0, 1]` and progress the fraction of items collected. Actions
/// are single ids in `0..4`; ids outside that range are clamped.
#[derive(Debug, Clone)]
pub struct GridQuest {
    spec: EnvSpec,
    agent: (i32, i32),
    items: [(i32, i32); ITEMS],
    collected: usize,
    t: usize,
}

impl GridQuest {
    pub fn new() -> Self {
        GridQuest {
            spec: EnvSpec {
                name: "grid-quest".into(),
                obs_dim: 2 + 2 * ITEMS + 1,
                act_dim: MOVES.len(),
                action_kind: ActionKind::Discrete,
                horizon: HORIZON,
                reward_kind: RewardKind::Sparse,
                subgoals: Some(ITEMS),
            },
            agent: (0, 0),
            items: [(0, 0); ITEMS],
            collected: 0,
            t: 0,
        }
    }

    fn state(&self) -> Vec<f32> {
        let scale = (SIZE - 1) as f32;
        let mut s = vec![self.agent.0 as f32 / scale, self.agent.1 as f32 / scale];
        for &(x, y) in &self.items {
            s.push(x as f32 / scale);
            s.push(y as f32 / scale);
        }
        s.push(self.collected as f32 / ITEMS as f32);
        s
    }
}

impl Default for GridQuest {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for GridQuest {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.agent = (rng.gen_range(0..SIZE), rng.gen_range(0..SIZE));
        let mut taken = vec![self.agent];
        for i in 0..ITEMS {
            let cell = loop {
                let c = (rng.gen_range(0..SIZE), rng.gen_range(0..SIZE));
                if !taken.contains(&c) {
                    break c;
                }
            };
            taken.push(cell);
            self.items[i] = cell;
        }
        self.collected = 0;
        self.t = 0;
        self.state()
    }

    fn step(&mut self, action: &[f32]) -> Step {
        let raw = action.first().copied().unwrap_or(0.0);
        let id = if raw.is_nan() { 0.0 } else { raw.round().clamp(0.0, (MOVES.len() - 1) as f32) };
        let clamped = action.len() != 1 || id != raw;
        let (dx, dy) = MOVES[id as usize];
        self.agent = ((self.agent.0 + dx).clamp(0, SIZE - 1), (self.agent.1 + dy).clamp(0, SIZE - 1));
        self.t += 1;
        let mut reward = 0.0;
        if self.collected < ITEMS && self.agent == self.items[self.collected] {
            self.collected += 1;
            reward = 1.0;
        }
        let success = self.collected == ITEMS;
        let truncated = !success && self.t >= HORIZON;
        Step { state: self.state(), reward, done: success || truncated, truncated, clamped }
    }

    fn oracle_action(&self) -> Vec<f32> {
        let target = self.items[self.collected.min(ITEMS - 1)];
        let id = if self.agent.0 < target.0 {
            3
        } else if self.agent.0 > target.0 {
            2
        } else if self.agent.1 < target.1 {
            0
        } else {
            1
        };
        vec![id as f32]
    }

    fn random_action(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        vec![rng.gen_range(0..MOVES.len()) as f32]
    }
}
