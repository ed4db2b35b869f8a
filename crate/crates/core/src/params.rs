//! Named, ordered parameter storage with Adam moment slots.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics; saved but not optimized.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Adam first moment.
    pub m: Option<Tensor<T>>,
    /// Adam second moment.
    pub v: Option<Tensor<T>>,
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, Parameter<T>>,
}

pub type Gradients<T> = HashMap<String, Tensor<T>>;

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Parameter {
                value,
                kind,
                m: None,
                v: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn entry(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Parameter<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn require_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Same names, kinds and values in another precision; optimizer state is dropped.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            kind: p.kind,
                            m: None,
                            v: None,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_uniqueness() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("b", Tensor::ones([2]), ParamKind::Trainable).unwrap();
        store.insert("a", Tensor::ones([3]), ParamKind::Buffer).unwrap();
        assert!(store.insert("a", Tensor::ones([1]), ParamKind::Buffer).is_err());
        assert_eq!(store.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(store.trainable_count(), 2);
    }
}
