//! Named parameter storage and per-pass binding onto a [`Graph`].

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::diffcore::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Standard deviation of every Gaussian-initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Parameters keyed by dotted name; the segment before the first dot is the
/// component group (`text_encoder`, `user_encoder`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    version: u64,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
        self.version += 1;
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Mutable access; bumps the version so cached item indexes go stale.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.version += 1;
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Monotone counter incremented on every mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
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

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.tensors.keys().map(|k| group_of(k).to_string()).collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.tensors.keys().any(|k| group_of(k) == group)
    }

    pub fn group(&self, group: &str) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        let group = group.to_string();
        self.tensors
            .iter()
            .filter(move |(k, _)| group_of(k) == group)
    }

    pub fn remove_group(&mut self, group: &str) {
        self.tensors.retain(|k, _| group_of(k) != group);
        self.version += 1;
    }

    /// Copies every tensor of `group` from `other`, replacing what is here.
    pub fn copy_group_from(&mut self, other: &ParamSet<T>, group: &str) {
        self.remove_group(group);
        for (k, t) in other.group(group) {
            self.tensors.insert(k.clone(), t.clone());
        }
        self.version += 1;
    }

    /// SHA-256 over names, shapes and values; changes iff any of them do.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.len() * T::BYTES);
            for v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

/// Initialization helpers used when building a fresh component.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::filled(shape, T::one())
    }
}

/// One forward (and optionally backward) pass over a parameter set.
///
/// Parameters are bound lazily on first use: trainable ones as leaves,
/// frozen ones as constants, so frozen parameters get exactly zero gradient.
pub struct Session<'p, T: Scalar> {
    pub g: Graph<T>,
    params: &'p ParamSet<T>,
    frozen: &'p BTreeSet<String>,
    bound: BTreeMap<String, NodeId>,
    pub(crate) dropout_rng: Option<ChaCha8Rng>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>, frozen: &'p BTreeSet<String>) -> Self {
        Self {
            g: Graph::new(),
            params,
            frozen,
            bound: BTreeMap::new(),
            dropout_rng: None,
        }
    }

    /// Enables dropout (where configured) using this stream.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.bound.get(name) {
            return Ok(*id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingGroup(name.to_string()))?
            .clone();
        let id = if self.frozen.contains(name) {
            self.g.constant(t)
        } else {
            self.g.leaf(t)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of every trainable parameter this pass touched; parameters the
    /// root does not depend on get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(k, id)| (k.clone(), grads.get_or_zeros(*id, self.g.shape(*id))))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}
