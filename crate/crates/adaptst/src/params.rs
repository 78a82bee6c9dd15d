use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable-or-frozen tensor. Freezing does not stop gradients (the
/// tape writes grads everywhere); it tells the optimizer to skip the update.
pub struct Parameter<T: Scalar> {
    pub path: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Path-keyed registry of every parameter in a model, iterated in sorted
/// path order everywhere so updates, checkpoints, and reports are
/// deterministic.
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: String, tensor: Tensor<T>) -> Result<()> {
        if self.map.contains_key(&path) {
            return Err(Error::DuplicatePath(path));
        }
        self.map.insert(
            path.clone(),
            Parameter {
                path,
                tensor,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<Parameter<T>> {
        self.map.remove(path)
    }

    pub fn get(&self, path: &str) -> Option<&Parameter<T>> {
        self.map.get(path)
    }

    pub fn require(&self, path: &str, context: &str) -> Result<&Parameter<T>> {
        self.map.get(path).ok_or_else(|| Error::MissingPath {
            path: path.to_string(),
            context: context.to_string(),
        })
    }

    pub fn tensor(&self, path: &str) -> Result<Tensor<T>> {
        Ok(self.require(path, "param store")?.tensor.clone())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sorted by path.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.map.values()
    }

    pub fn paths(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        match self.map.get_mut(path) {
            Some(p) => {
                p.trainable = trainable;
                Ok(())
            }
            None => Err(Error::MissingPath {
                path: path.to_string(),
                context: "set_trainable".to_string(),
            }),
        }
    }

    pub fn freeze_all(&mut self) {
        for p in self.map.values_mut() {
            p.trainable = false;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&self) {
        for p in self.map.values() {
            p.tensor.zero_grad();
        }
    }

    /// Copy of the current trainable parameter values, keyed by path.
    pub fn snapshot_trainable(&self) -> BTreeMap<String, Vec<T>> {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| (p.path.clone(), p.tensor.values()))
            .collect()
    }

    /// Write saved values back over the named parameters.
    pub fn restore(&mut self, snapshot: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (path, values) in snapshot {
            let p = self.require(path, "restore")?;
            if p.tensor.numel() != values.len() {
                return Err(Error::ParamShapeMismatch {
                    path: path.clone(),
                    found: vec![values.len()],
                    expected: p.tensor.shape(),
                });
            }
            p.tensor.set_values(values.clone());
        }
        Ok(())
    }
}
