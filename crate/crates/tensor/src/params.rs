use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    /// Replaces the values of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: &[S]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(TensorError::Dimension(format!(
                "parameter {} has shape {:?}, got {} values",
                self.names[id.0],
                t.shape(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// The graph nodes that a [`ParamStore`] was bound to for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over caller-created nodes, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<S: Scalar> Graph<S> {
    /// Inserts every parameter as a leaf. With `trainable == false` the leaves
    /// are constants and the backward pass skips them.
    pub fn bind(&mut self, store: &ParamStore<S>, trainable: bool) -> Binding {
        let vars = store
            .tensors
            .iter()
            .map(|t| if trainable { self.leaf(&t.clone().with_requires_grad(true)) } else { self.constant(t) })
            .collect();
        Binding { vars }
    }

    /// Gradients of every bound parameter after `backward`, zeros where a
    /// parameter did not influence the root.
    pub fn param_grads(&self, store: &ParamStore<S>, binding: &Binding) -> Vec<Vec<S>> {
        store
            .tensors
            .iter()
            .zip(&binding.vars)
            .map(|(t, &v)| self.grad(v).map_or_else(|| vec![S::zero(); t.numel()], <[S]>::to_vec))
            .collect()
    }
}
