//! Named parameter storage shared by blocks, models, the optimizer and
//! checkpointing.
//!
//! Entries keep their insertion order, which fixes both the enumeration
//! order reported to callers and the serialization order of checkpoints.

use crate::tensor::{Real, Tensor};
use crate::{CoreError, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Stable handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Learnable parameters receive gradients and count toward the model
    /// size; running statistics do not.
    pub learnable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, learnable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(CoreError::Param {
                detail: format!("duplicate parameter name '{name}'"),
            });
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Param {
            name: name.to_string(),
            tensor,
            learnable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.learnable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Learnable scalars under a name prefix (e.g. one block's share).
    pub fn learnable_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.learnable && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Overwrite the values of a named entry (shape must match).
    pub fn set_values(&mut self, name: &str, values: &[T]) -> Result<()> {
        let id = self.id(name).ok_or_else(|| CoreError::Param {
            detail: format!("no parameter named '{name}'"),
        })?;
        let t = self.tensor_mut(id);
        if t.len() != values.len() {
            return Err(CoreError::Param {
                detail: format!(
                    "value count {} does not match '{name}' ({} elements)",
                    values.len(),
                    t.len()
                ),
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Copy values from `other` for every entry whose name and shape match.
    /// Returns how many entries were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(&oi) = other.index.get(&e.name) {
                let src = &other.entries[oi].tensor;
                if src.shape() == e.tensor.shape() {
                    e.tensor.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }
}
