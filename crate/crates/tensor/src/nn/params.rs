use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameters and non-trainable buffers (e.g. running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(TensorError::invalid("insert_param", format!("duplicate name `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(TensorError::invalid("insert_buffer", format!("duplicate name `{name}`")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Scalar parameter count (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// All parameter and buffer names, sorted.
    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.params.keys().chain(self.buffers.keys()).cloned().collect();
        keys.sort();
        keys
    }

    /// Names present in only one store, or present in both with different shapes.
    pub fn mismatched_keys(&self, other: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        let both = |s: &ParamStore, k: &str| s.params.get(k).or_else(|| s.buffers.get(k)).map(|t| t.shape().to_vec());
        for k in self.keys().into_iter().chain(other.keys()) {
            if both(self, &k) != both(other, &k) && !out.contains(&k) {
                out.push(k);
            }
        }
        out.sort();
        out
    }

    /// Overwrites every tensor with the same-named tensor of `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        let bad = self.mismatched_keys(other);
        if !bad.is_empty() {
            return Err(TensorError::invalid(
                "copy_from",
                format!("mismatched keys: {}", bad.join(", ")),
            ));
        }
        self.params.clone_from(&other.params);
        self.buffers.clone_from(&other.buffers);
        Ok(())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(TensorError::shapes("set_param", slot.shape(), value.shape())),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(TensorError::shapes("set_buffer", slot.shape(), value.shape())),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BindMode {
    /// Parameters become differentiable leaves.
    pub trainable: bool,
    /// Normalization layers use batch statistics and update running buffers.
    pub training: bool,
}

impl BindMode {
    pub const TRAIN: BindMode = BindMode {
        trainable: true,
        training: true,
    };
    pub const EVAL: BindMode = BindMode {
        trainable: false,
        training: false,
    };
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    mode: BindMode,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
    buffer_updates: RefCell<BTreeMap<String, Tensor>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: BindMode) -> Self {
        Self {
            tape,
            store,
            mode,
            bound: RefCell::new(BTreeMap::new()),
            buffer_updates: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn mode(&self) -> BindMode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode.training
    }

    /// The tape variable of parameter `name`; repeated calls share one leaf.
    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self
            .store
            .param(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let var = if self.mode.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub fn buffer(&self, name: &str) -> Result<Tensor> {
        self.store
            .buffer(name)
            .cloned()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn update_buffer(&self, name: &str, value: Tensor) {
        self.buffer_updates.borrow_mut().insert(name.to_string(), value);
    }

    /// Gradients of every bound parameter (zeros where nothing flowed).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }

    pub fn take_buffer_updates(&self) -> BTreeMap<String, Tensor> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_keys_report_shape_and_presence() {
        let mut a = ParamStore::new();
        a.insert_param("w", Tensor::zeros([2])).unwrap();
        a.insert_param("only_a", Tensor::zeros([1])).unwrap();
        let mut b = ParamStore::new();
        b.insert_param("w", Tensor::zeros([3])).unwrap();
        assert_eq!(a.mismatched_keys(&b), vec!["only_a".to_string(), "w".to_string()]);
        assert!(a.copy_from(&b).is_err());
        assert!(a.insert_param("w", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn binder_shares_leaves() {
        let mut s = ParamStore::new();
        s.insert_param("w", Tensor::ones([2])).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &s, BindMode::TRAIN);
        let w1 = b.param("w").unwrap();
        let w2 = b.param("w").unwrap();
        assert_eq!(w1.id(), w2.id());
        let loss = w1.mul(&w2).unwrap().sum();
        let g = b.gradients(&tape.backward(loss).unwrap());
        assert_eq!(g["w"].data(), &[2.0, 2.0]);
        assert!(b.param("missing").is_err());
    }
}
