//! AdamW with decoupled weight decay, linear warmup and global-norm clipping.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::params::WeightStore;
use crate::tensor::Tensor;

/// Anything that can hand out parameters by name for an update.
pub trait ParamSource {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>>;
}

impl ParamSource for WeightStore<f32> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.get_mut(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Fraction of total steps spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup() -> f64 {
    0.1
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_frac: default_warmup(),
            grad_clip: Some(0.25),
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    config: OptimConfig,
    total_steps: usize,
    step: usize,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimConfig, total_steps: usize) -> Self {
        AdamW { config, total_steps, step: 0, state: HashMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate applied at the next step.
    pub fn current_lr(&self) -> f64 {
        let warmup = (self.config.warmup_frac * self.total_steps as f64).round() as usize;
        if warmup == 0 {
            return self.config.lr;
        }
        self.config.lr * ((self.step + 1) as f64 / warmup as f64).min(1.0)
    }

    /// Updates each named parameter that has a gradient. Names the source
    /// cannot resolve are skipped.
    pub fn step(&mut self, grads: &BTreeMap<String, Tensor<f32>>, params: &mut impl ParamSource) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let clip_scale = match c.grad_clip {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data())
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / (norm + 1e-6) } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = params.param_mut(name) else { continue };
            let n = param.numel();
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let decay = (1.0 - lr * c.weight_decay) as f32;
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let g = f64::from(g) * clip_scale;
                *m = (c.beta1 * f64::from(*m) + (1.0 - c.beta1) * g) as f32;
                *v = (c.beta2 * f64::from(*v) + (1.0 - c.beta2) * g * g) as f32;
                let mhat = f64::from(*m) / bc1;
                let vhat = f64::from(*v) / bc2;
                *p *= decay;
                *p -= (lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
    }
}
