//! Ordered, named parameter storage shared by all layers of a model.

use crate::tensor::{GradGraph, Node, Tensor, TensorError};

/// Stable handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors. Creation order is the
/// checkpoint order; names must be unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replace a parameter value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        if self.values[id.0].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// In-place update of a parameter's scalars.
    pub fn update(&mut self, id: ParamId, f: impl FnMut(&mut f64)) {
        self.values[id.0].data_mut().iter_mut().for_each(f);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Bind a parameter into a graph as a differentiable leaf. Repeated binds
    /// of the same parameter return the same node, so gradients accumulate.
    pub fn bind(&self, g: &mut GradGraph, id: ParamId) -> Node {
        g.bind(id.0, &self.values[id.0])
    }

    /// Gradients collected from a graph after backward, ordered by parameter.
    pub fn grads_from(&self, g: &GradGraph) -> Vec<(ParamId, Tensor)> {
        g.bound_grads()
            .into_iter()
            .map(|(k, t)| (ParamId(k), t))
            .collect()
    }
}
