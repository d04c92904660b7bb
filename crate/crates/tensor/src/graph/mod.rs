//! Tape of recorded operations and the reverse sweep over it.

mod elementwise;
mod layout;
mod linalg;
mod nn_ops;
mod reduce;

use std::fmt;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written vector-Jacobian product, for kernels that are
/// cheaper to differentiate as a unit (dynamic programs, fused losses).
pub trait CustomOp<S: Scalar> {
    fn name(&self) -> &str;

    /// Returns one gradient per input (same length as that input), or `None`
    /// for inputs that receive no gradient.
    fn backward(&self, inputs: &[&[S]], output: &[S], grad_out: &[S]) -> Vec<Option<Vec<S>>>;
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    IndexSelect { input: Var, axis: usize, indices: Vec<usize> },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LayerNorm { input: Var, gain: Option<Var>, bias: Option<Var>, normalized: Vec<S>, rstd: Vec<S> },
    L2Norm { input: Var, axis: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::MatMul(..) => "matmul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::L2Norm { .. } => "l2norm",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SumAll(a)
            | Op::Reshape(a) => vec![*a],
            Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Narrow { input, .. }
            | Op::Permute { input, .. }
            | Op::IndexSelect { input, .. }
            | Op::Softmax { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::L2Norm { input, .. } => vec![*input],
            Op::LayerNorm { input, gain, bias, .. } => {
                let mut v = vec![*input];
                v.extend(gain.iter().copied());
                v.extend(bias.iter().copied());
                v
            }
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<S: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a valid topological order, so the graph is acyclic by construction.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Graph<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are tracked iff the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that never receives gradients (data, masks, labels).
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_raw(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Leaf built from raw parts that tracks gradients.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_raw(t.shape().to_vec(), t.into_data(), Op::Leaf, true))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    /// Value (and gradient, once backward has run) as an owned tensor.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.data.clone())
            .expect("graph nodes hold consistent shapes")
            .with_requires_grad(n.requires_grad);
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).expect("gradient shape matches node");
        }
        t
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// First element of a node, for single-element results.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].data[0]
    }

    pub(crate) fn push_raw(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(crate::shape::numel(&shape), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Pushes a derived node; it requires grad iff any input does.
    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(shape, data, op, rg)
    }

    /// Registers the output of a [`CustomOp`] computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<S>,
        op: Box<dyn CustomOp<S>>,
    ) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Reverse sweep seeded with ones at `root`. Every node reachable from
    /// `root` that requires grad ends up with a populated gradient; gradients
    /// from several consumers are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let seed = vec![S::one(); self.nodes[root.0].data.len()];
        self.backward_with(root, seed)
    }

    pub fn backward_with(&mut self, root: Var, seed: Vec<S>) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::Graph(format!("node {} does not exist", root.0)));
        }
        if seed.len() != self.nodes[root.0].data.len() {
            return Err(TensorError::Dimension(format!(
                "seed of length {} for node of shape {:?}",
                seed.len(),
                self.nodes[root.0].shape
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g_out) = self.grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                let mut sink = GradSink { nodes: &self.nodes[..id], grads: &mut self.grads[..id] };
                backward_node(&self.nodes[id], &g_out, &mut sink);
            }
            self.grads[id] = Some(g_out);
        }
        Ok(())
    }
}

/// Write access to the gradients of nodes strictly before the one being
/// differentiated.
pub(crate) struct GradSink<'a, S: Scalar> {
    pub(crate) nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> GradSink<'a, S> {
    /// Gradient buffer of `v`, zero-initialized on first use; `None` when `v`
    /// does not require grad.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    pub(crate) fn data(&self, v: Var) -> &'a [S] {
        &self.nodes[v.0].data
    }

    pub(crate) fn shape(&self, v: Var) -> &'a [usize] {
        &self.nodes[v.0].shape
    }

    pub(crate) fn add_to(&mut self, v: Var, g: &[S]) {
        if let Some(slot) = self.slot(v) {
            for (s, &x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }
}

fn backward_node<S: Scalar>(node: &Node<S>, g: &[S], sink: &mut GradSink<'_, S>) {
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            elementwise::backward_binary(&node.op, *a, *b, &node.shape, g, sink)
        }
        Op::Neg(a) => {
            let ga: Vec<S> = g.iter().map(|&x| -x).collect();
            sink.add_to(*a, &ga);
        }
        Op::Scale(a, k) => {
            let ga: Vec<S> = g.iter().map(|&x| x * *k).collect();
            sink.add_to(*a, &ga);
        }
        Op::AddScalar(a) | Op::Reshape(a) => sink.add_to(*a, g),
        Op::Sigmoid(a) | Op::Gelu(a) | Op::Relu(a) | Op::Exp(a) | Op::Log(a) => {
            elementwise::backward_unary(&node.op, *a, out, g, sink)
        }
        Op::MatMul(a, b) => linalg::backward_matmul(*a, *b, &node.shape, g, sink),
        Op::Sum { input, axis } => reduce::backward_sum(*input, *axis, S::one(), g, sink),
        Op::Mean { input, axis } => {
            let n = sink.shape(*input)[*axis];
            reduce::backward_sum(*input, *axis, S::one() / S::lit(n as f64), g, sink)
        }
        Op::SumAll(a) => {
            let n = sink.data(*a).len();
            sink.add_to(*a, &vec![g[0]; n]);
        }
        Op::Concat { inputs, axis } => layout::backward_concat(inputs, *axis, &node.shape, g, sink),
        Op::Narrow { input, axis, start } => {
            layout::backward_narrow(*input, *axis, *start, &node.shape, g, sink)
        }
        Op::Permute { input, perm } => layout::backward_permute(*input, perm, g, sink),
        Op::IndexSelect { input, axis, indices } => {
            layout::backward_index_select(*input, *axis, indices, g, sink)
        }
        Op::Softmax { input, axis } => nn_ops::backward_softmax(*input, *axis, out, g, sink),
        Op::LogSoftmax { input, axis } => nn_ops::backward_log_softmax(*input, *axis, out, g, sink),
        Op::LayerNorm { input, gain, bias, normalized, rstd } => {
            nn_ops::backward_layernorm(*input, *gain, *bias, normalized, rstd, g, sink)
        }
        Op::L2Norm { input, axis } => nn_ops::backward_l2norm(*input, *axis, out, g, sink),
        Op::Custom { inputs, op } => {
            let in_data: Vec<&[S]> = inputs.iter().map(|v| sink.data(*v)).collect();
            let grads = op.backward(&in_data, out, g);
            for (v, gi) in inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    sink.add_to(*v, &gi);
                }
            }
        }
    }
}
