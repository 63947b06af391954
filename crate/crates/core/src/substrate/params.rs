use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Named parameters with a frozen/trainable partition.
///
/// Every name is either frozen or trainable; frozen names must exist.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            bail!(Config, "cannot freeze unknown parameter {name}");
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self.params.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|n| !n.starts_with(prefix));
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.params.keys().cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys().filter(|n| !self.frozen.contains(*n))
    }

    /// Number of scalar values in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| !self.frozen.contains(*n)).map(|(_, t)| t.len()).sum()
    }

    /// Merge `other` into `self`, keeping `other`'s frozen flags.
    pub fn extend(&mut self, other: ParamSet) {
        for (name, t) in other.params {
            self.frozen.remove(&name);
            self.params.insert(name, t);
        }
        self.frozen.extend(other.frozen);
    }

    /// Copy of every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let params: BTreeMap<String, Tensor> =
            self.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(n, t)| (n.clone(), t.clone())).collect();
        let frozen = self.frozen.iter().filter(|n| params.contains_key(*n)).cloned().collect();
        ParamSet { params, frozen }
    }
}
