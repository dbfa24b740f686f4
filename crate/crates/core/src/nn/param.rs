use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::autodiff::{Gradients, ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by an optimizer and counted by `num_params`.
    Trainable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
}

/// Named registry of the tensors owned by one model.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    frozen: bool,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    /// A clone is an independent store with its own identity.
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            frozen: self.frozen,
            entries: self.entries.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Invalid(format!("duplicate parameter name '{name}'")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name,
            kind,
            value: Arc::new(value),
            grad,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey { store: self.id, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry<T> {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].value
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[index].value)
    }

    pub fn set_value(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[index];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("'{}' is {:?}, got {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].grad
    }

    /// Frozen stores bind as constants: no gradient reaches them.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Put a parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, index: usize) -> Var {
        let e = &self.entries[index];
        let trainable = !self.frozen && e.kind == ParamKind::Trainable;
        tape.param(self.key(index), Arc::clone(&e.value), trainable)
    }

    /// Add this store's share of `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (key, g) in grads.params() {
            if key.store == self.id {
                self.entries[key.index].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::ZERO);
        }
    }

    /// Element count over trainable tensors.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([2]), ParamKind::Trainable).unwrap();
        assert!(s.add("a", Tensor::zeros([3]), ParamKind::Buffer).is_err());
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        let i = s.add("w", Tensor::full([3], 2.0), ParamKind::Trainable).unwrap();
        s.set_frozen(true);
        let mut tape = Tape::new();
        let w = s.bind(&mut tape, i);
        let l = tape.sum(w).unwrap();
        let g = tape.backward(l).unwrap();
        s.accumulate(&g).unwrap();
        assert!(s.grad(i).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clones_have_distinct_identity() {
        let mut a = ParamStore::<f64>::new();
        let i = a.add("w", Tensor::full([1], 1.0), ParamKind::Trainable).unwrap();
        let b = a.clone();
        assert_ne!(a.key(i), b.key(i));
    }
}
