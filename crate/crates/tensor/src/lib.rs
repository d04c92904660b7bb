//! Dense row-major tensors with a tape-based reverse-mode differentiation
//! engine, plus the small set of neural-network building blocks (linear
//! layers, pre-norm transformer encoder, Adam) the few-shot head needs.
//!
//! Computation is recorded on a [`Graph`]: every operation appends a node, so
//! node order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Parameters live in a [`ParamStore`] outside any graph
//! and are bound into each fresh graph as leaves.

mod error;
mod graph;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod scalar;
mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{CustomOp, Graph, Var};
pub use params::{Binding, ParamId, ParamStore};
pub use scalar::Scalar;
pub use shape::{broadcast_shape, numel, split_axis};
pub use tensor::Tensor;
