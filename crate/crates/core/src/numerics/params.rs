use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{BufferUpdate, Tape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Named parameters and buffers, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { value, trainable });
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.insert(name, value, true);
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.insert(name, value, false);
    }

    /// Gaussian init with standard deviation `std`.
    pub fn param_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(normal.sample(rng))).collect();
        self.param(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every entry whose name starts with `prefix`; returns how many.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|k, _| !k.starts_with(prefix));
        before - self.entries.len()
    }

    /// Number of learnable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Number of stored scalars, buffers included.
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), ParamEntry { value: e.value.cast(), trainable: e.trainable }))
                .collect(),
        }
    }

    /// Gradients of every registered trainable parameter after `backward`.
    /// Parameters registered more than once have their gradients summed;
    /// parameters unreachable from the loss get zeros.
    pub fn gradients(&self, tape: &Tape<T>) -> Gradients<T> {
        let mut out: Gradients<T> = BTreeMap::new();
        for (name, var) in tape.params() {
            let len = tape.value(*var).len();
            let acc = out.entry(name.clone()).or_insert_with(|| vec![T::zero(); len]);
            if let Some(g) = tape.grad(*var) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        out
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate<T>>) -> Result<()> {
        for u in updates {
            let t = self.get_mut(&u.name)?;
            if t.len() != u.value.len() {
                return Err(Error::dim("buffer update", format!("`{}` length mismatch", u.name)));
            }
            t.data_mut().copy_from_slice(&u.value);
        }
        Ok(())
    }
}
