//! Low-rank adapters on attention projections, freeze masks, merging and
//! trainable-parameter accounting.
//!
//! An adapter on a `d×k` weight `W₀` holds `B` (`d×r`, zero-initialized) and
//! `A` (`r×k`, gaussian); the effective weight is `W₀ + (α/r)·B·A`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LamoError, Result};
use crate::params::WeightStore;
use crate::tensor::{Scalar, Tensor};

/// Name prefix for adapter tensors inside checkpoints and parameter maps.
pub const ADAPTER_PREFIX: &str = "adapters/";

/// Standard deviation of the gaussian used for `A`.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<F: Scalar = f32> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
    pub rank: usize,
    pub alpha: f64,
}

impl<F: Scalar> Adapter<F> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Result<Tensor<F>> {
        Ok(self.b.matmul(&self.a)?.scale(F::from_f64_lossy(self.scale())))
    }

    pub fn cast<G: Scalar>(&self) -> Adapter<G> {
        Adapter { a: self.a.cast(), b: self.b.cast(), rank: self.rank, alpha: self.alpha }
    }
}

/// Rank and scale recorded alongside serialized adapters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub rank: usize,
    pub alpha: f64,
}

/// One adapter per target tensor name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet<F: Scalar = f32> {
    adapters: BTreeMap<String, Adapter<F>>,
}

impl<F: Scalar> AdapterSet<F> {
    pub fn new() -> Self {
        AdapterSet { adapters: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: &str) -> Option<&Adapter<F>> {
        self.adapters.get(target)
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Adapter<F>)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn a_name(&self, target: &str) -> String {
        format!("{ADAPTER_PREFIX}{target}/A")
    }

    pub fn b_name(&self, target: &str) -> String {
        format!("{ADAPTER_PREFIX}{target}/B")
    }

    /// Flattened `(name, tensor)` view using the `adapters/<target>/{A,B}` names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        self.adapters
            .iter()
            .flat_map(|(t, ad)| [(self.a_name(t), &ad.a), (self.b_name(t), &ad.b)])
            .collect()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let rest = name.strip_prefix(ADAPTER_PREFIX)?;
        let (target, which) = rest.rsplit_once('/')?;
        let ad = self.adapters.get_mut(target)?;
        match which {
            "A" => Some(&mut ad.a),
            "B" => Some(&mut ad.b),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(|a| a.a.numel() + a.b.numel()).sum()
    }

    pub fn meta(&self) -> Option<AdapterMeta> {
        self.adapters.values().next().map(|a| AdapterMeta { rank: a.rank, alpha: a.alpha })
    }

    /// Adds adapters for `targets`; a target that already has one is an error.
    pub fn inject(
        &mut self,
        weights: &WeightStore<F>,
        targets: &[String],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh = BTreeMap::new();
        for target in targets {
            if self.adapters.contains_key(target) || fresh.contains_key(target) {
                return Err(LamoError::invalid(format!("{target} already has an adapter")));
            }
            let w = weights
                .get(target)
                .ok_or_else(|| LamoError::invalid(format!("unknown adapter target {target}")))?;
            if w.shape().len() != 2 {
                return Err(LamoError::invalid(format!("{target} is not a matrix")));
            }
            let (d, k) = (w.shape()[0], w.shape()[1]);
            if rank == 0 || rank > d.min(k) {
                return Err(LamoError::invalid(format!(
                    "rank {rank} invalid for {target} ({d}x{k})"
                )));
            }
            let a = Tensor::randn(&[rank, k], ADAPTER_INIT_STD, &mut rng);
            let b = Tensor::zeros(&[d, rank]);
            fresh.insert(target.clone(), Adapter { a, b, rank, alpha });
        }
        self.adapters.extend(fresh);
        Ok(())
    }

    /// Inserts a deserialized adapter.
    pub fn insert(&mut self, target: impl Into<String>, adapter: Adapter<F>) -> Result<()> {
        let target = target.into();
        let r = adapter.b.shape().get(1).copied().unwrap_or(0);
        if adapter.a.shape().first() != Some(&r) || r != adapter.rank {
            return Err(LamoError::shape(format!("adapter {target}: inconsistent rank")));
        }
        if self.adapters.insert(target.clone(), adapter).is_some() {
            return Err(LamoError::invalid(format!("{target} already has an adapter")));
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> AdapterSet<G> {
        AdapterSet { adapters: self.adapters.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Per-tensor trainable flag.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    flags: BTreeMap<String, bool>,
}

/// How the pre-trained backbone is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// Backbone frozen, LoRA on Q/K/V.
    #[default]
    Lora,
    /// Every tensor trainable, no adapters.
    Full,
    /// Backbone frozen, no adapters.
    Frozen,
}

/// Tensors owned by the decision model rather than the language backbone.
pub fn is_task_tensor(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("head.")
}

impl FreezeMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn set(&mut self, name: impl Into<String>, trainable: bool) {
        self.flags.insert(name.into(), trainable);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.flags.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.flags.iter().filter(|(_, &v)| v).map(|(k, _)| k.as_str())
    }

    /// Mask for `names` (store tensors) plus `adapter_names` under `mode`.
    pub fn for_mode<'a>(
        names: impl IntoIterator<Item = &'a str>,
        adapter_names: impl IntoIterator<Item = String>,
        mode: AdaptMode,
    ) -> FreezeMask {
        let mut mask = FreezeMask::default();
        for name in names {
            let trainable = mode == AdaptMode::Full || is_task_tensor(name);
            mask.set(name, trainable);
        }
        for name in adapter_names {
            mask.set(name, true);
        }
        mask
    }

    pub fn all(names: impl IntoIterator<Item = String>, trainable: bool) -> FreezeMask {
        FreezeMask { flags: names.into_iter().map(|n| (n, trainable)).collect() }
    }
}

/// Fresh adapters on `targets` and a mask freezing every other backbone tensor.
pub fn inject<F: Scalar>(
    weights: &WeightStore<F>,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<(AdapterSet<F>, FreezeMask)> {
    let mut set = AdapterSet::new();
    set.inject(weights, targets, rank, alpha, seed)?;
    let adapter_names = set.named_tensors().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
    let mask = FreezeMask::for_mode(weights.names(), adapter_names, AdaptMode::Lora);
    Ok((set, mask))
}

/// `W₀ + (α/r)·B·A`.
pub fn effective_weight<F: Scalar>(w0: &Tensor<F>, adapter: &Adapter<F>) -> Result<Tensor<F>> {
    let delta = adapter.delta()?;
    if delta.shape() != w0.shape() {
        return Err(LamoError::shape(format!(
            "adapter delta {:?} vs weight {:?}",
            delta.shape(),
            w0.shape()
        )));
    }
    w0.add(&delta)
}

/// Folds every adapter into its target, returning an adapter-free store.
pub fn merge<F: Scalar>(weights: &WeightStore<F>, adapters: &AdapterSet<F>) -> Result<WeightStore<F>> {
    let mut merged = weights.clone();
    for (target, adapter) in adapters.iter() {
        let w0 = weights.require(target)?;
        merged.replace(target, effective_weight(w0, adapter)?);
    }
    Ok(merged)
}

/// Names of the Q, K and V projection weights of every layer.
pub fn qkv_targets(n_layers: usize) -> Vec<String> {
    (0..n_layers)
        .flat_map(|i| ["q", "k", "v"].map(|p| format!("h.{i}.attn.{p}.weight")))
        .collect()
}

/// Adapter tensor shapes `injected` would create, without allocating them.
pub fn planned_adapter_shapes(
    shapes: &[(String, Vec<usize>)],
    targets: &[String],
    rank: usize,
) -> Result<Vec<(String, Vec<usize>)>> {
    let lookup: BTreeMap<&str, &Vec<usize>> = shapes.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let mut out = Vec::new();
    for t in targets {
        let s = lookup
            .get(t.as_str())
            .ok_or_else(|| LamoError::invalid(format!("unknown adapter target {t}")))?;
        let (d, k) = (s[0], s[1]);
        if rank == 0 || rank > d.min(k) {
            return Err(LamoError::invalid(format!("rank {rank} invalid for {t}")));
        }
        out.push((format!("{ADAPTER_PREFIX}{t}/A"), vec![rank, k]));
        out.push((format!("{ADAPTER_PREFIX}{t}/B"), vec![d, rank]));
    }
    Ok(out)
}

/// Accounting bucket of a parameter name.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with(ADAPTER_PREFIX) {
        "adapters"
    } else if name.starts_with("embed.timestep") {
        "timestep_embedding"
    } else if name.starts_with("embed.") {
        "modality_embedders"
    } else if name.starts_with("head.") {
        "action_head"
    } else if name == "wte" || name == "wpe" {
        "language_projections"
    } else {
        "transformer"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupCount {
    pub trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    pub groups: BTreeMap<String, GroupCount>,
}

/// Counts scalars by freeze mask over `(name, numel)` pairs.
pub fn trainable_param_count<'a>(
    inventory: impl IntoIterator<Item = (&'a str, usize)>,
    mask: &FreezeMask,
) -> ParamReport {
    let mut groups: BTreeMap<String, GroupCount> = BTreeMap::new();
    let (mut trainable, mut total) = (0usize, 0usize);
    for (name, numel) in inventory {
        let g = groups.entry(param_group(name).to_string()).or_default();
        g.total += numel;
        total += numel;
        if mask.is_trainable(name) {
            g.trainable += numel;
            trainable += numel;
        }
    }
    let fraction = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
    ParamReport { trainable, total, fraction, groups }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> WeightStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = WeightStore::new();
        s.insert("h.0.attn.q.weight", Tensor::randn(&[4, 6], 1.0, &mut rng)).unwrap();
        s.insert("h.0.attn.q.bias", Tensor::zeros(&[4])).unwrap();
        s.insert("head.fc0.weight", Tensor::randn(&[2, 4], 1.0, &mut rng)).unwrap();
        s
    }

    #[test]
    fn effective_weight_hand_product() {
        let w0 = Tensor::<f64>::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let ad = Adapter {
            a: Tensor::new(vec![1, 2], vec![0., 1.]).unwrap(),
            b: Tensor::new(vec![2, 1], vec![1., 0.]).unwrap(),
            rank: 1,
            alpha: 1.0,
        };
        assert_eq!(effective_weight(&w0, &ad).unwrap().data(), &[1., 1., 0., 1.]);
        let doubled = Adapter { alpha: 2.0, ..ad.clone() };
        let d1 = effective_weight(&w0, &ad).unwrap().add(&w0.scale(-1.0)).unwrap();
        let d2 = effective_weight(&w0, &doubled).unwrap().add(&w0.scale(-1.0)).unwrap();
        assert_eq!(d1.scale(2.0), d2);
        let zero_b = Adapter { b: Tensor::zeros(&[2, 1]), ..ad };
        assert_eq!(effective_weight(&w0, &zero_b).unwrap(), w0);
        let wrong = Tensor::<f64>::zeros(&[3, 3]);
        assert!(effective_weight(&wrong, &zero_b).is_err());
    }

    #[test]
    fn inject_contract() {
        let s = store();
        let targets = vec!["h.0.attn.q.weight".to_string()];
        let (set, mask) = inject(&s, &targets, 2, 2.0, 0).unwrap();
        let ad = set.get("h.0.attn.q.weight").unwrap();
        assert_eq!(ad.a.shape(), &[2, 6]);
        assert_eq!(ad.b.shape(), &[4, 2]);
        assert!(ad.b.data().iter().all(|&v| v == 0.0));
        assert_eq!(effective_weight(s.get(&targets[0]).unwrap(), ad).unwrap(), *s.get(&targets[0]).unwrap());
        assert!(!mask.is_trainable("h.0.attn.q.weight"));
        assert!(!mask.is_trainable("h.0.attn.q.bias"));
        assert!(mask.is_trainable("head.fc0.weight"));
        assert!(mask.is_trainable("adapters/h.0.attn.q.weight/A"));
        assert!(mask.is_trainable("adapters/h.0.attn.q.weight/B"));

        let mut again = set.clone();
        assert!(again.inject(&s, &targets, 2, 2.0, 1).is_err());
        assert!(inject(&s, &["nope".to_string()], 2, 2.0, 0).is_err());
        assert!(inject(&s, &targets, 5, 5.0, 0).is_err());
        assert!(inject(&s, &[targets[0].clone(), targets[0].clone()], 1, 1.0, 0).is_err());
    }

    #[test]
    fn merge_with_empty_or_zero_adapters_is_identity() {
        let s = store();
        assert!(merge(&s, &AdapterSet::new()).unwrap().bitwise_eq(&s));
        let (set, _) = inject(&s, &["h.0.attn.q.weight".to_string()], 2, 2.0, 0).unwrap();
        assert!(merge(&s, &set).unwrap().bitwise_eq(&s));
        let m = merge(&s, &AdapterSet::new()).unwrap();
        assert!(merge(&m, &AdapterSet::new()).unwrap().bitwise_eq(&m));
    }

    #[test]
    fn adapter_tensor_names_roundtrip() {
        let s = store();
        let (mut set, _) = inject(&s, &["h.0.attn.q.weight".to_string()], 1, 1.0, 0).unwrap();
        for (name, _) in set.clone().named_tensors() {
            assert!(set.tensor_mut(&name).is_some(), "{name}");
        }
        assert!(set.tensor_mut("adapters/h.0.attn.q.weight/C").is_none());
    }

    #[test]
    fn accounting_extremes() {
        let s = store();
        let inv: Vec<(&str, usize)> = s.iter().map(|(n, t)| (n, t.numel())).collect();
        let none = FreezeMask::all(s.names().map(String::from), false);
        assert_eq!(trainable_param_count(inv.clone(), &none).fraction, 0.0);
        let all = FreezeMask::all(s.names().map(String::from), true);
        let r = trainable_param_count(inv, &all);
        assert_eq!(r.fraction, 1.0);
        assert_eq!(r.total, 24 + 4 + 8);
        assert_eq!(r.groups["action_head"].total, 8);
    }
}
