//! Named parameter storage and binding of parameters into a graph.

use std::collections::BTreeMap;

use ndiff::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Suffixes of non-trainable state tensors (batch-norm running statistics).
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Ordered map of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Overwrites every tensor of this store whose name starts with `prefix`
    /// from `source`, checking that names and shapes agree.
    pub fn load_from(&mut self, source: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, t) in self
            .tensors
            .iter_mut()
            .filter(|(n, _)| n.starts_with(prefix))
        {
            let src = source
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Deterministic initializers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform weights for a `fan_in -> fan_out` map.
    pub fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(-limit..limit))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape.to_vec(), |_| n.sample(self.rng))
    }
}

/// A graph under construction together with the leaves bound for each parameter.
pub struct Session {
    pub graph: Graph,
    vars: BTreeMap<String, Var>,
    /// Names bound as differentiable leaves.
    trainable: Vec<String>,
    /// Batch statistics produced by training-mode batch-norm, keyed by layer prefix.
    pub(crate) bn_batches: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Self {
            graph: Graph::new(),
            vars: BTreeMap::new(),
            trainable: Vec::new(),
            bn_batches: Vec::new(),
        }
    }

    /// Continues recording on an existing graph.
    pub fn from_graph(graph: Graph) -> Self {
        Self {
            graph,
            ..Self::new()
        }
    }

    /// Adds every tensor of `store` as a leaf. Names for which `trainable`
    /// returns true (and that are not buffers) receive gradients.
    pub fn bind(&mut self, store: &ParamStore, trainable: impl Fn(&str) -> bool) {
        for (name, t) in store.iter() {
            let v = if trainable(name) && !is_buffer(name) {
                self.trainable.push(name.clone());
                self.graph.param(t.clone())
            } else {
                self.graph.constant(t.clone())
            };
            self.vars.insert(name.clone(), v);
        }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Gradients of `root` for every trainable bound parameter.
    pub fn gradients(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads: Gradients = self.graph.backward(root)?;
        Ok(self
            .trainable
            .iter()
            .map(|n| {
                let v = self.vars[n];
                (n.clone(), grads.wrt(&self.graph, v))
            })
            .collect())
    }
}
