use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Float, NnError, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Named, ordered collection of trainable tensors.
///
/// Each store carries a process-unique id so a [`Graph`](crate::Graph) can
/// bind parameters from several stores at once. Cloning yields a new id.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    frozen: HashSet<usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            frozen: self.frozen.clone(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            frozen: HashSet::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers a tensor under `name`; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Indices of every parameter whose name starts with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Frozen parameters enter graphs as constants.
    pub fn set_frozen(&mut self, idx: usize, frozen: bool) {
        if frozen {
            self.frozen.insert(idx);
        } else {
            self.frozen.remove(&idx);
        }
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen.contains(&idx)
    }

    pub fn freeze_all(&mut self) {
        self.frozen = (0..self.values.len()).collect();
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if self.values[idx].shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[idx].shape(),
                value.shape()
            )));
        }
        self.values[idx] = value;
        Ok(())
    }

    /// Same parameters in another precision (fresh store id).
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
        }
    }
}
