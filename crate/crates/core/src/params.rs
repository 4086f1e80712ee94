//! Named, ordered parameter collections.

use std::collections::HashMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tensors keyed by canonical name, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

/// Tape handles for every entry of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles recorded elsewhere, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.0[self.index[name]]
    }

    /// Gradients for each entry after `tape.backward`, zero where absent.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|((_, t), &v)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) -> Result<()> {
        for (name, t) in &self.entries {
            ckpt.push(format!("{prefix}{name}"), t.cast())?;
        }
        Ok(())
    }

    /// Copies `prefix + name` tensors from `ckpt` into matching entries.
    ///
    /// Entries accepted by `skip` are left untouched. Every other entry must
    /// be present with an identical shape; all mismatches are reported at once.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str, skip: impl Fn(&str) -> bool) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &mut self.entries {
            if skip(name) {
                continue;
            }
            match ckpt.get(&format!("{prefix}{name}")) {
                None => problems.push(format!("  {name}: missing from checkpoint")),
                Some(src) if src.shape() != t.shape() => problems.push(format!(
                    "  {name}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    t.shape()
                )),
                Some(src) => *t = src.cast(),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "incompatible checkpoint:\n{}",
                problems.join("\n")
            )))
        }
    }
}
