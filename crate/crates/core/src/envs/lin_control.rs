use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clamp_unit, Env, EnvSpec, RewardKind, Step};
use crate::data::ActionKind;

const N: usize = 4;
const M: usize = 2;
const HORIZON: usize = 50;
/// Action cost weight `c` in `-‖s‖² - c·‖a‖²`.
pub const ACTION_COST: f64 = 0.1;

/// Slightly unstable coupled oscillators: position/velocity pairs driven by
/// two bounded forces.
const A: [[f64; N]; N] = [
    [1.0, 0.1, 0.0, 0.0],
    [0.02, 1.0, 0.0, 0.01],
    [0.0, 0.0, 1.0, 0.1],
    [0.0, 0.01, 0.02, 1.0],
];
const B: [[f64; M]; N] = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.0], [0.0, 0.1]];

/// Linear dynamics `s' = A·s + B·a` with dense reward
/// `-‖s‖² - c·‖a‖²` on the pre-step state and the applied action.
#[derive(Debug, Clone)]
pub struct LinControl {
    spec: EnvSpec,
    s: [f64; N],
    gain: [[f64; N]; M],
    t: usize,
}

/// Infinite-horizon LQR gain `K` (so `a = -K·s`) from the discrete Riccati
/// recursion with `Q = I`, `R = c·I`.
pub fn lqr_gain() -> [[f64; N]; M] {
    let mut p = [[0.0; N]; N];
    for (i, row) in p.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut k = [[0.0; N]; M];
    for _ in 0..2000 {
        // BᵀP (M×N), BᵀPB + R (M×M), BᵀPA (M×N)
        let mut btp = [[0.0; N]; M];
        for i in 0..M {
            for j in 0..N {
                btp[i][j] = (0..N).map(|r| B[r][i] * p[r][j]).sum();
            }
        }
        let mut s = [[0.0; M]; M];
        for i in 0..M {
            for j in 0..M {
                s[i][j] = (0..N).map(|r| btp[i][r] * B[r][j]).sum::<f64>() + if i == j { ACTION_COST } else { 0.0 };
            }
        }
        let mut btpa = [[0.0; N]; M];
        for i in 0..M {
            for j in 0..N {
                btpa[i][j] = (0..N).map(|r| btp[i][r] * A[r][j]).sum();
            }
        }
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        for i in 0..M {
            for j in 0..N {
                k[i][j] = (0..M).map(|r| inv[i][r] * btpa[r][j]).sum();
            }
        }
        // P = Q + AᵀP(A - BK)
        let mut a_bk = A;
        for i in 0..N {
            for j in 0..N {
                a_bk[i][j] -= (0..M).map(|r| B[i][r] * k[r][j]).sum::<f64>();
            }
        }
        let mut next = [[0.0; N]; N];
        for i in 0..N {
            for j in 0..N {
                let pa: f64 = (0..N).map(|r| A[r][i] * (0..N).map(|c| p[r][c] * a_bk[c][j]).sum::<f64>()).sum();
                next[i][j] = pa + if i == j { 1.0 } else { 0.0 };
            }
        }
        p = next;
    }
    k
}

impl LinControl {
    pub fn new() -> Self {
        LinControl {
            spec: EnvSpec {
                name: "lin-control".into(),
                obs_dim: N,
                act_dim: M,
                action_kind: ActionKind::Continuous,
                horizon: HORIZON,
                reward_kind: RewardKind::Dense,
                subgoals: None,
            },
            s: [0.0; N],
            gain: lqr_gain(),
            t: 0,
        }
    }

    fn state(&self) -> Vec<f32> {
        self.s.iter().map(|&v| v as f32).collect()
    }
}

impl Default for LinControl {
    fn default() -> Self {
        Self::new()
    }
}

/// `-‖s‖² - c·‖a‖²`.
pub fn reward(state: &[f64], action: &[f64]) -> f64 {
    -state.iter().map(|v| v * v).sum::<f64>() - ACTION_COST * action.iter().map(|v| v * v).sum::<f64>()
}

impl Env for LinControl {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.s {
            *v = rng.gen_range(-1.0..1.0);
        }
        self.t = 0;
        self.state()
    }

    fn step(&mut self, action: &[f32]) -> Step {
        let (a, clamped) = clamp_unit(action, M);
        let a: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
        let r = reward(&self.s, &a);
        let mut next = [0.0; N];
        for (i, out) in next.iter_mut().enumerate() {
            *out = (0..N).map(|j| A[i][j] * self.s[j]).sum::<f64>() + (0..M).map(|j| B[i][j] * a[j]).sum::<f64>();
        }
        self.s = next;
        self.t += 1;
        let done = self.t >= HORIZON;
        Step { state: self.state(), reward: r as f32, done, truncated: done, clamped }
    }

    fn oracle_action(&self) -> Vec<f32> {
        (0..M)
            .map(|i| (-(0..N).map(|j| self.gain[i][j] * self.s[j]).sum::<f64>()).clamp(-1.0, 1.0) as f32)
            .collect()
    }

    fn random_action(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
    }
}
