//! Named parameter and buffer registry.

use std::collections::HashMap;
use std::fmt::Display;

use rand::RngCore;

use crate::init::Init;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Optimisable weight.
    Param,
    /// State that is saved with the model but never optimised
    /// (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub role: Role,
}

/// Every tensor of a model in registration order, addressable by its dotted
/// name (`layer1.0.conv1.weight`).
#[derive(Default, Debug)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor, role: Role) {
        assert!(!self.index.contains_key(&name), "duplicate tensor name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedTensor { name, tensor, role });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn params(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter().filter(|e| e.role == Role::Param)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params().filter(|e| e.tensor.requires_grad()).map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        self.params().filter(|e| e.tensor.requires_grad()).map(|e| e.tensor.clone()).collect()
    }
}

/// Creates tensors under a dotted name prefix.
pub struct VarBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a> VarBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        VarBuilder { store, rng, prefix: String::new() }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Child builder for a sub-module.
    pub fn pp(&mut self, name: impl Display) -> VarBuilder<'_> {
        let prefix = self.full_name(&name.to_string());
        VarBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor {
        let data = init.sample(shape, self.rng);
        let t = Tensor::param(data, shape);
        self.store.insert(self.full_name(name), t.clone(), Role::Param);
        t
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Tensor {
        let t = Tensor::full(shape, value);
        self.store.insert(self.full_name(name), t.clone(), Role::Buffer);
        t
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }
}
