//! Named parameter storage.
//!
//! A [`ParamStore`] owns the values of one model component (backbone, control
//! module, adapter) in registration order. Its [`ParamRegistry`] is the
//! value-free catalog: names, shapes and trainable flags. Names are
//! dot-separated hierarchical paths and are unique within a store.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered catalog of parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
}

impl ParamRegistry {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::DuplicateParam(e.name.clone()));
            }
        }
        Ok(ParamRegistry { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Concatenate registries of components that together form one model.
    pub fn merged<'a>(parts: impl IntoIterator<Item = &'a ParamRegistry>) -> Result<Self> {
        let entries = parts
            .into_iter()
            .flat_map(|r| r.entries.iter().cloned())
            .collect();
        Self::from_entries(entries)
    }
}

/// Parameter values plus their registry entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.entries.push(ParamEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            trainable: true,
        });
        self.values.push(value);
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn registry(&self) -> ParamRegistry {
        ParamRegistry {
            entries: self.entries.clone(),
        }
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.value(self.id(name)?))
    }

    /// Replace a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        value.expect_shape(&self.entries[id.0].shape, name)?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    /// Mark exactly the named parameters trainable; everything else is frozen.
    pub fn set_trainable_set(&mut self, names: &BTreeSet<String>) -> Result<()> {
        for n in names {
            self.id(n)?;
        }
        for e in &mut self.entries {
            e.trainable = names.contains(&e.name);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamEntry, &Tensor<T>)> {
        self.entries.iter().zip(&self.values)
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of all values (registries must match too).
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: crate::tensor::Bits,
    {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn total_params(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Registers freshly initialized parameters under a name prefix.
///
/// Weights are drawn from `N(0, 1/fan_in)`; biases and shifts start at zero,
/// normalization scales at one. The RNG stream is consumed in registration
/// order, so identical build sequences give identical values.
pub struct Initializer<'s> {
    store: &'s mut ParamStore<f32>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'s> Initializer<'s> {
    pub fn new(store: &'s mut ParamStore<f32>, seed: u64) -> Self {
        Initializer {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, segment: impl Into<String>) {
        self.prefix.push(segment.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Run `f` with `segment` appended to the name prefix.
    pub fn scoped<R>(&mut self, segment: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push(segment);
        let r = f(self);
        self.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32);
        self.store.add(self.full_name(leaf), t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.store
            .add(self.full_name(leaf), Tensor::full(shape.to_vec(), value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::zeros([2])).unwrap();
        assert!(matches!(
            s.add("a.weight", Tensor::zeros([2])),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn initializer_is_deterministic_and_prefixed() {
        let build = || {
            let mut s = ParamStore::new();
            let mut init = Initializer::new(&mut s, 7);
            init.scoped("enc", |i| {
                i.normal("weight", &[3, 4], 4).unwrap();
                i.constant("bias", &[3], 0.0).unwrap();
            });
            s
        };
        let (a, b) = (build(), build());
        assert!(a.bit_eq(&b));
        assert_eq!(
            a.registry().names().collect::<Vec<_>>(),
            ["enc.weight", "enc.bias"]
        );
        assert_eq!(a.total_params(), 15);
    }

    #[test]
    fn trainable_set_must_name_existing_params() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros([1])).unwrap();
        s.add("y", Tensor::zeros([1])).unwrap();
        let mut set = BTreeSet::new();
        set.insert("y".to_string());
        s.set_trainable_set(&set).unwrap();
        assert!(!s.is_trainable(s.id("x").unwrap()));
        assert!(s.is_trainable(s.id("y").unwrap()));
        set.insert("z".to_string());
        assert!(s.set_trainable_set(&set).is_err());
    }
}
