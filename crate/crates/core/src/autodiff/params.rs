//! Named parameter storage shared between forward passes.

use super::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g` as a differentiable leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.values.iter().map(|v| g.variable(v.clone())).collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.values.iter().map(|v| g.constant(v.clone())).collect()
    }

    /// Gradients for bound parameters; parameters that did not influence
    /// the loss get zeros.
    pub fn collect_grads(&self, grads: &Gradients, nodes: &[NodeId]) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(nodes)
            .map(|(v, &n)| {
                grads
                    .get(n)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }

    /// Replaces values from `(name, tensor)` entries; names and shapes must
    /// match this store exactly.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        for ((name, value), (want_name, slot)) in entries
            .iter()
            .zip(self.names.iter().zip(self.values.iter_mut()))
        {
            if name != want_name || value.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry {name} {:?} does not match {want_name} {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}
