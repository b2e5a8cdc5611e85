//! Named trainable parameters.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Tensor, Var};

/// Shape plus row-major data; the on-disk form of a tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.as_standard_layout().iter().copied().collect(),
        }
    }
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Option<Tensor> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).ok()
    }
}

/// Parameters keyed by stable dotted names (`expert_0.fc1.weight`, `gate.bias`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a gradient-tracked leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant; used for inference-only graphs.
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
                .collect(),
        }
    }

    pub fn to_stored(&self) -> BTreeMap<String, StoredTensor> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.into())).collect()
    }

    pub fn from_stored(stored: &BTreeMap<String, StoredTensor>) -> Option<Self> {
        let mut tensors = BTreeMap::new();
        for (k, v) in stored {
            tensors.insert(k.clone(), v.to_tensor()?);
        }
        Some(Self { tensors })
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients by parameter name; untouched parameters get zeros.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(k).unwrap().raw_dim()));
                (k.clone(), g)
            })
            .collect()
    }
}
