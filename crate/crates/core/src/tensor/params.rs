use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Mat, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.names[id.0].starts_with(prefix))
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// SHA-256 of the little-endian `f32` encoding of one array.
    pub fn digest(&self, id: ParamId) -> String {
        let mut h = Sha256::new();
        for v in self.values[id.0].as_slice() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.ids()
            .map(|id| (self.names[id.0].clone(), self.digest(id)))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every array whose name exists in `src` with the same shape.
    /// Returns the names copied.
    pub fn copy_matching(&mut self, src: &ParamStore<T>, prefixes: &[&str]) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.names[id.0].clone();
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(v) = src.by_name(&name) else {
                return Err(Error::config(format!("source checkpoint lacks {name}")));
            };
            if v.shape() != self.values[id.0].shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    v.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = v.clone();
            copied.push(name);
        }
        Ok(copied)
    }
}
