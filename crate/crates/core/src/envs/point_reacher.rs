use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clamp_unit, Env, EnvSpec, RewardKind, Step};
use crate::data::ActionKind;

const DT: f32 = 0.1;
const DAMPING: f32 = 0.95;
const ARENA: f32 = 1.5;
pub const SUCCESS_RADIUS: f32 = 0.1;
const HORIZON: usize = 100;

/// A point mass pushed by a bounded 2-D acceleration toward a goal.
///
/// State is `[x, y, vx, vy, gx, gy]`. The sparse variant pays 1 and ends the
/// episode once the point is within [`SUCCESS_RADIUS`] of the goal; the dense
/// variant pays `-distance` every step and still ends on success.
#[derive(Debug, Clone)]
pub struct PointReacher {
    spec: EnvSpec,
    pos: [f32; 2],
    vel: [f32; 2],
    goal: [f32; 2],
    t: usize,
}

impl PointReacher {
    pub fn new(reward_kind: RewardKind) -> Self {
        let name = match reward_kind {
            RewardKind::Sparse => "point-reacher",
            RewardKind::Dense => "point-reacher-dense",
        };
        PointReacher {
            spec: EnvSpec {
                name: name.into(),
                obs_dim: 6,
                act_dim: 2,
                action_kind: ActionKind::Continuous,
                horizon: HORIZON,
                reward_kind,
                subgoals: None,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
        }
    }

    fn state(&self) -> Vec<f32> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1]]
    }

    pub fn distance(&self) -> f32 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }
}

impl Env for PointReacher {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        loop {
            self.goal = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if self.distance() >= 0.5 {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.t = 0;
        self.state()
    }

    fn step(&mut self, action: &[f32]) -> Step {
        let (a, clamped) = clamp_unit(action, 2);
        for i in 0..2 {
            self.vel[i] = DAMPING * self.vel[i] + DT * a[i];
            self.pos[i] = (self.pos[i] + DT * self.vel[i]).clamp(-ARENA, ARENA);
        }
        self.t += 1;
        let dist = self.distance();
        let success = dist < SUCCESS_RADIUS;
        let reward = match self.spec.reward_kind {
            RewardKind::Sparse => f32::from(u8::from(success)),
            RewardKind::Dense => -dist,
        };
        let truncated = !success && self.t >= HORIZON;
        Step { state: self.state(), reward, done: success || truncated, truncated, clamped }
    }

    fn oracle_action(&self) -> Vec<f32> {
        (0..2)
            .map(|i| (2.0 * (self.goal[i] - self.pos[i]) - 2.5 * self.vel[i]).clamp(-1.0, 1.0))
            .collect()
    }

    fn random_action(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_actions_never_succeed() {
        let mut env = PointReacher::new(RewardKind::Sparse);
        env.reset(4);
        let mut total = 0.0;
        loop {
            let s = env.step(&[0.0, 0.0]);
            total += s.reward;
            if s.done {
                assert!(s.truncated);
                break;
            }
        }
        assert_eq!(total, 0.0);
    }

    #[test]
    fn oracle_reaches_goal() {
        let mut env = PointReacher::new(RewardKind::Sparse);
        for seed in 0..20 {
            env.reset(seed);
            let mut total = 0.0;
            loop {
                let s = env.step(&env.oracle_action());
                total += s.reward;
                if s.done {
                    assert!(!s.truncated, "seed {seed}");
                    break;
                }
            }
            assert_eq!(total, 1.0);
        }
    }
}
