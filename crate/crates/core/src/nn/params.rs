use std::collections::BTreeMap;

use crate::autograd::{BufferUpdate, Graph, ParamId, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named tensors of a model: trainable parameters plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Inserts a parameter as a differentiable graph leaf.
    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.is_trainable(id) {
            g.param(id, self.get(id).clone())
        } else {
            g.constant(self.get(id).clone())
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate<T>>) {
        for u in updates {
            assert_eq!(self.get(u.id).shape(), u.value.shape(), "buffer shape");
            *self.get_mut(u.id) = u.value;
        }
    }

    /// Copies every entry named `prefix*` from `other` into the entry with the
    /// same name here. Returns how many entries were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        self.copy_renamed_from(other, prefix, prefix)
    }

    /// Copies `from_prefix*` entries of `other` into `to_prefix*` entries here.
    pub fn copy_renamed_from(&mut self, other: &ParamStore<T>, from_prefix: &str, to_prefix: &str) -> usize {
        let mut copied = 0;
        for id in other.ids_with_prefix(from_prefix) {
            let suffix = &other.name(id)[from_prefix.len()..];
            let target = format!("{to_prefix}{suffix}");
            if let Some(dst) = self.id(&target) {
                assert_eq!(self.get(dst).shape(), other.get(id).shape(), "{target}: shape");
                *self.get_mut(dst) = other.get(id).clone();
                copied += 1;
            }
        }
        copied
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
