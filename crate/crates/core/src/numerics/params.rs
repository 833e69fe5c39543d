use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named collection of trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count restricted to parameters whose names start with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate_grads(&mut self, grads: &ParamGrads) -> Result<()> {
        for (id, g) in &grads.entries {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Copies values from `other` for every parameter whose name matches,
    /// optionally rewriting a name prefix. Shapes must agree.
    pub fn load_matching(&mut self, other: &ParamStore, strip: &str, add: &str) -> Result<usize> {
        let mut loaded = 0;
        for (name, tensor) in other.iter() {
            let Some(rest) = name.strip_prefix(strip) else {
                continue;
            };
            let target = format!("{add}{rest}");
            if let Some(id) = self.lookup(&target) {
                let dst = &mut self.tensors[id.0];
                if dst.shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{target}` has shape {:?} but checkpoint holds {:?}",
                        dst.shape(),
                        tensor.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(tensor.data());
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Replaces every parameter value with the same-named tensor of `other`.
    /// Missing names or mismatched shapes are errors naming the tensor.
    pub fn load_exact(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(src) = other.lookup(name) else {
                return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
            };
            let src = other.get(src);
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} but checkpoint holds {:?}",
                    self.tensors[i].shape(),
                    src.shape()
                )));
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub(crate) entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}
