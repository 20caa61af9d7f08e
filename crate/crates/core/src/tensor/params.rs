use super::{ParamId, Tape, Tensor, Var};

/// Ordered, named collection of trainable tensors.
///
/// Position in the set is the parameter's local id; a model composed of
/// several sets registers them with disjoint id offsets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape` as a parameter with id `offset + i`.
    pub fn register(&self, tape: &mut Tape, offset: ParamId) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(offset + i, t))
            .collect()
    }

    /// Pairs every tensor with id `offset + i`, for the optimizer.
    pub fn with_ids(&mut self, offset: ParamId) -> Vec<(ParamId, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (offset + i, t))
            .collect()
    }

    /// Replaces the tensor at `i`; the shape must not change.
    pub fn replace(&mut self, i: usize, tensor: Tensor) -> bool {
        if self.tensors[i].shape() != tensor.shape() {
            return false;
        }
        self.tensors[i] = tensor.with_grad();
        true
    }
}
