use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::{Gradients, ParamKey, Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Named, ordered collection of trainable tensors.
///
/// Every store carries a process-unique id so that several stores (student,
/// adapters, teacher) can be bound onto one tape without key collisions.
/// Cloning allocates a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let idx = self.tensors.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(t);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn key(&self, idx: usize) -> ParamKey {
        ParamKey { store: self.id, index: idx }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds a parameter onto `tape`. With `trainable == false` it enters as a
    /// constant and no gradient flows back to this store.
    pub fn bind(&self, tape: &mut Tape, idx: usize, trainable: bool) -> Var {
        if trainable {
            tape.param(self.key(idx), &self.tensors[idx])
        } else {
            tape.frozen_param(self.key(idx), &self.tensors[idx])
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds the gradients belonging to this store. Returns how many
    /// parameters received a contribution.
    pub fn accumulate(&mut self, grads: &Gradients) -> usize {
        let mut n = 0;
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if let Some(g) = grads.get(ParamKey { store: self.id, index: i }) {
                t.accumulate_grad(g);
                n += 1;
            }
        }
        n
    }

    pub fn scale_grad(&mut self, c: f64) {
        for t in &mut self.tensors {
            if let Some(mut g) = t.take_grad() {
                g.iter_mut().for_each(|v| *v *= c);
                t.accumulate_grad(&g);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        if flat.len() != self.numel() {
            return Err(TensorError::Invalid(format!(
                "flat buffer of {} for store of {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Flattens `grads` in store order; unreachable parameters contribute zeros.
    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (i, t) in self.tensors.iter().enumerate() {
            match grads.get(self.key(i)) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        out
    }

    /// True when both stores hold the same names, shapes, and bit patterns.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
