//! Named learnable weights.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// A learnable tensor with a stable, model-unique name.
#[derive(Clone, Debug, PartialEq)]
pub struct Weight<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Index of a weight inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every weight of one model (or the architecture parameters of a
/// search session).
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    uid: u64,
    weights: Vec<Weight<T>>,
    names: HashSet<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            weights: Vec::new(),
            names: HashSet::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Register a weight; names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if !self.names.insert(name.clone()) {
            return Err(Error::invalid(format!("duplicate weight name '{name}'")));
        }
        self.weights.push(Weight {
            name,
            tensor: tensor.with_requires_grad(),
        });
        Ok(ParamId(self.weights.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Weight<T> {
        &self.weights[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Weight<T> {
        &mut self.weights[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.weights.iter().position(|w| w.name == name).map(ParamId)
    }

    pub fn weights(&self) -> &[Weight<T>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Weight<T>] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Number of learnable scalars: the sum of all weight buffer lengths.
    pub fn count(&self) -> usize {
        self.weights.iter().map(|w| w.tensor.len()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for w in &mut self.weights {
            w.tensor.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for w in &mut self.weights {
            w.tensor.clear_grad();
        }
    }

    /// FNV-1a over every weight's bit pattern; used to assert that a step
    /// left a store untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in &self.weights {
            for v in w.tensor.data() {
                for b in v.widen().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]).unwrap()).is_err());
        assert_eq!(s.count(), 2);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros(&[4]).unwrap()).unwrap();
        let before = s.fingerprint();
        s.get_mut(id).tensor.data_mut()[2] = 1.0;
        assert_ne!(before, s.fingerprint());
    }
}
