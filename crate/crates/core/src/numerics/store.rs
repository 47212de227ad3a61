use std::collections::BTreeMap;

use super::element::Element;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors plus opaque byte-valued metadata.
///
/// Names are kept sorted so iteration order (and therefore serialization)
/// is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    meta: BTreeMap<String, Vec<u8>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    /// Bind a stored tensor to `tape` as a named trainable leaf.
    pub fn bind(&self, tape: &Tape<T>, name: &str) -> Result<Var<T>> {
        Ok(tape.param(name, self.get(name)?.clone()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    /// Total number of scalars across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, bytes: Vec<u8>) {
        self.meta.insert(key.into(), bytes);
    }

    pub fn meta(&self, key: &str) -> Option<&[u8]> {
        self.meta.get(key).map(Vec::as_slice)
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&String, &Vec<u8>)> {
        self.meta.iter()
    }

    pub fn cast<U: Element>(&self) -> Result<ParamStore<U>> {
        let mut out = ParamStore::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.cast()?);
        }
        out.meta = self.meta.clone();
        Ok(out)
    }
}
