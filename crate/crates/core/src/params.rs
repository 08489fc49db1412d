//! Named tensor storage and the binder that lifts stored weights into a graph.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{LamoError, Result};
use crate::lora::{AdapterSet, FreezeMask};
use crate::tensor::{Scalar, Tensor};

/// Ordered map from dot-separated tensor name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<F: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> WeightStore<F> {
    pub fn new() -> Self {
        WeightStore { tensors: BTreeMap::new() }
    }

    /// Adds a tensor; fails if the name is taken.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(LamoError::invalid(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor<F>) -> Option<Tensor<F>> {
        self.tensors.insert(name.to_string(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| LamoError::invalid(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> WeightStore<G> {
        WeightStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn bitwise_eq(&self, other: &WeightStore<F>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }

    /// Moves every tensor of `other` in, failing on name clashes.
    pub fn extend(&mut self, other: WeightStore<F>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }
}

/// Inverted dropout applied by graph builders while training.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply<F: Scalar>(this: Option<&mut Dropout>, graph: &mut Graph<F>, x: NodeId) -> NodeId {
        let Some(d) = this else { return x };
        if d.p <= 0.0 {
            return x;
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - d.p));
        let n = graph.value(x).numel();
        let factors = (0..n)
            .map(|_| if d.rng.gen::<f64>() < d.p { F::zero() } else { keep })
            .collect();
        graph.mul_const(x, factors)
    }
}

/// Binds stored weights (and LoRA adapters) to graph leaves on first use.
///
/// A name resolves to its *effective* weight: the stored tensor, plus
/// `(α/r)·B·A` when an adapter targets it. Leaves are trainable only when a
/// freeze mask is supplied and marks them so.
pub struct ParamBinder<'a, F: Scalar> {
    pub graph: Graph<F>,
    store: &'a WeightStore<F>,
    adapters: Option<&'a AdapterSet<F>>,
    mask: Option<&'a FreezeMask>,
    leaves: BTreeMap<String, NodeId>,
    effective: HashMap<String, NodeId>,
}

impl<'a, F: Scalar> ParamBinder<'a, F> {
    pub fn new(
        store: &'a WeightStore<F>,
        adapters: Option<&'a AdapterSet<F>>,
        mask: Option<&'a FreezeMask>,
    ) -> Self {
        ParamBinder {
            graph: Graph::new(),
            store,
            adapters,
            mask,
            leaves: BTreeMap::new(),
            effective: HashMap::new(),
        }
    }

    /// Inference-only binder: every leaf is a constant.
    pub fn frozen(store: &'a WeightStore<F>, adapters: Option<&'a AdapterSet<F>>) -> Self {
        Self::new(store, adapters, None)
    }

    pub fn store(&self) -> &WeightStore<F> {
        self.store
    }

    fn leaf(&mut self, name: &str, tensor: &Tensor<F>) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let trainable = self.mask.is_some_and(|m| m.is_trainable(name));
        let id = if trainable {
            self.graph.param(tensor.clone())
        } else {
            self.graph.constant(tensor.clone())
        };
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Effective weight node for `name`.
    pub fn get(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.effective.get(name) {
            return Ok(id);
        }
        let store = self.store;
        let base = store.require(name)?;
        let w0 = self.leaf(name, base);
        let id = match self.adapters.and_then(|a| a.get(name).map(|ad| (a, ad))) {
            Some((set, adapter)) => {
                let (a_name, b_name) = (set.a_name(name), set.b_name(name));
                let a = self.leaf(&a_name, &adapter.a);
                let b = self.leaf(&b_name, &adapter.b);
                let ba = self.graph.matmul(b, a);
                let delta = self.graph.scale(ba, F::from_f64_lossy(adapter.scale()));
                self.graph.add(w0, delta)
            }
            None => w0,
        };
        self.effective.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get_opt(&mut self, name: &str) -> Result<Option<NodeId>> {
        if self.store.contains(name) {
            self.get(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Gradients of every trainable leaf touched by the graph, keyed by name.
    pub fn grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.leaves
            .iter()
            .filter(|(_, &id)| self.graph.requires_grad(id))
            .map(|(name, &id)| {
                let g = self
                    .graph
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(id).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
