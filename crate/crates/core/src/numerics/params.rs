use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to an entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer; weight decay applies.
    Weight,
    /// Updated by the optimizer; no weight decay (biases, norms, bias tables).
    NoDecay,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    /// Frozen trainables receive no gradient and are skipped by the optimizer.
    pub frozen: bool,
}

impl<T> ParamEntry<T> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer && !self.frozen
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(alloc::format!("parameter `{name}` registered twice")));
        }
        let id = self.entries.len();
        let requires_grad = kind != ParamKind::Buffer;
        let mut tensor = tensor;
        tensor.requires_grad = requires_grad;
        self.entries.push(ParamEntry { name: name.to_string(), tensor, kind, frozen: false });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Freezes every parameter whose name satisfies `pred`.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut count = 0;
        for e in &mut self.entries {
            if pred(&e.name) {
                e.frozen = true;
                e.tensor.grad = None;
                count += 1;
            }
        }
        count
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable()).map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    kind: e.kind,
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values of every same-named tensor from `(name, tensor)` pairs.
    /// Fails listing all shape or name differences if the sets disagree.
    pub fn load_values<'a, I>(&mut self, tensors: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Tensor<T>)>,
    {
        let mut diffs = Vec::new();
        let mut seen = alloc::vec![false; self.entries.len()];
        let mut staged = Vec::new();
        for (name, t) in tensors {
            match self.by_name.get(name) {
                None => diffs.push(alloc::format!("unexpected `{name}` {:?}", t.shape())),
                Some(&i) => {
                    seen[i] = true;
                    let want = self.entries[i].tensor.shape();
                    if want != t.shape() {
                        diffs.push(alloc::format!("`{name}`: model {:?} vs file {:?}", want, t.shape()));
                    } else {
                        staged.push((i, t));
                    }
                }
            }
        }
        for (i, s) in seen.iter().enumerate() {
            if !s {
                diffs.push(alloc::format!(
                    "missing `{}` {:?}",
                    self.entries[i].name,
                    self.entries[i].tensor.shape()
                ));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Shape(alloc::format!(
                "checkpoint does not match model: {}",
                diffs.join("; ")
            )));
        }
        for (i, t) in staged {
            let e = &mut self.entries[i].tensor;
            e.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
