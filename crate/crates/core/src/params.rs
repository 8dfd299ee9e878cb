//! Named tensor registry: the full parameter set of a model, addressable
//! per-tensor, plus the trainable-subset view used during adaptation.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

/// Parameters receive gradients; buffers are plain named data (reference
/// mel-spectrograms) carried through checkpoints untouched by training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Parameter,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry<T: Scalar> {
    pub mat: Mat<T>,
    pub kind: TensorKind,
}

/// Ordered name → tensor map. Iteration order is lexicographic, which keeps
/// checkpoints and training byte-reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, mat: Mat<T>) {
        let name = name.into();
        let prev = self.entries.insert(
            name.clone(),
            Entry {
                mat,
                kind: TensorKind::Parameter,
            },
        );
        assert!(prev.is_none(), "duplicate tensor name {name}");
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, mat: Mat<T>) {
        let name = name.into();
        let prev = self.entries.insert(
            name.clone(),
            Entry {
                mat,
                kind: TensorKind::Buffer,
            },
        );
        assert!(prev.is_none(), "duplicate tensor name {name}");
    }

    /// Overlay a tensor, keeping the existing kind if present.
    pub fn overlay(&mut self, name: &str, mat: Mat<T>, kind: TensorKind) {
        match self.entries.get_mut(name) {
            Some(e) => e.mat = mat,
            None => {
                self.entries.insert(name.to_string(), Entry { mat, kind });
            }
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Mat<T>> {
        self.entries
            .get(name)
            .map(|e| &e.mat)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.mat)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<TensorKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == TensorKind::Parameter)
            .map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over parameters (buffers excluded).
    pub fn param_elems(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == TensorKind::Parameter)
            .map(|e| e.mat.len())
            .sum()
    }
}

/// Names marked trainable; the complement of the parameter registry is
/// frozen.
#[derive(Debug, Clone, Default)]
pub struct TrainableSet {
    names: BTreeSet<String>,
}

impl TrainableSet {
    pub fn new() -> Self {
        TrainableSet {
            names: BTreeSet::new(),
        }
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        TrainableSet {
            names: names.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>) {
        self.names.insert(name.into());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.names.iter()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total trainable element count, looked up in a registry.
    pub fn elems<T: Scalar>(&self, params: &ParamSet<T>) -> usize {
        self.names
            .iter()
            .filter_map(|n| params.get(n).ok())
            .map(|m| m.len())
            .sum()
    }
}
