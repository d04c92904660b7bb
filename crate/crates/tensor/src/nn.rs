//! Linear layers, layer normalization, multi-head self-attention and the
//! pre-norm transformer encoder layer.
//!
//! Layers are plain descriptions holding [`ParamId`]s; their tensors live in a
//! [`ParamStore`] and are resolved through a [`Binding`] at forward time.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map over the last axis: `x · W + b`, `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from N(0, std²), bias zero.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(vec![in_dim, out_dim], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Linear map initialized to the identity (square only).
    pub fn identity<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, scale: f64) -> Self {
        let mut w = Tensor::<S>::eye(dim);
        w.data_mut().iter_mut().for_each(|v| *v *= S::lit(scale));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])));
        Self { weight, bias, in_dim: dim, out_dim: dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, x: Var) -> Result<Var> {
        let last = *g.shape(x).last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(TensorError::Dimension(format!(
                "linear layer expects last dimension {}, got input {:?}",
                self.in_dim,
                g.shape(x)
            )));
        }
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = S::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(vec![dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, x: Var) -> Result<Var> {
        g.layernorm(x, Some(p.var(self.gain)), Some(p.var(self.bias)), LAYERNORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, std, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, std, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, std, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, std, rng),
            heads,
            dim,
        })
    }

    /// `[B, L, C] -> [B, H, L, C/H]`
    fn split_heads<S: Scalar>(&self, g: &mut Graph<S>, x: Var, b: usize, l: usize) -> Result<Var> {
        let x = g.reshape(x, &[b, l, self.heads, self.dim / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    fn as_batched<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<(Var, usize, usize)> {
        let shape = g.shape(x).to_vec();
        match shape.as_slice() {
            [l, c] if *c == self.dim => Ok((g.reshape(x, &[1, *l, *c])?, 1, *l)),
            [b, l, c] if *c == self.dim => Ok((x, *b, *l)),
            _ => Err(TensorError::Dimension(format!(
                "attention expects [L, {}] or [B, L, {}], got {shape:?}",
                self.dim, self.dim
            ))),
        }
    }

    /// Attention probabilities `[B, H, L, L]`.
    pub fn weights<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, x: Var) -> Result<Var> {
        let (x, b, l) = self.as_batched(g, x)?;
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let q = self.split_heads(g, q, b, l)?;
        let k = self.split_heads(g, k, b, l)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt());
        g.softmax(scores, -1)
    }

    /// Self-attention over the token axis; output has the input's shape.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, x: Var) -> Result<Var> {
        let in_shape = g.shape(x).to_vec();
        let attn = self.weights(g, p, x)?;
        let (xb, b, l) = self.as_batched(g, x)?;
        let v = self.value.forward(g, p, xb)?;
        let v = self.split_heads(g, v, b, l)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, self.dim])?;
        let out = self.output.forward(g, p, ctx)?;
        g.reshape(out, &in_shape)
    }
}

/// Pre-normalization transformer encoder layer without positional terms:
/// `x + Attn(LN(x))`, then `h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub activation: Activation,
}

impl EncoderLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, std, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, dim * ffn_mult, true, std, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), dim * ffn_mult, dim, true, std, rng),
            activation: Activation::Gelu,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.ffn_norm.forward(g, p, x)?;
        let h = self.ffn_in.forward(g, p, h)?;
        let h = self.activation.apply(g, h);
        let h = self.ffn_out.forward(g, p, h)?;
        g.add(x, h)
    }

    /// Zeroes both residual branches so the layer computes the identity.
    pub fn zero_residual<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.attn.output.zero(store);
        self.ffn_out.zero(store);
    }
}

/// Stack of encoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ffn_mult, std, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        Ok(x)
    }

    pub fn zero_residual<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for layer in &self.layers {
            layer.zero_residual(store);
        }
    }
}
