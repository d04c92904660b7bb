//! Motion feature extraction and hierarchical motion refinement.

use fsar_tensor::nn::{Activation, Linear};
use fsar_tensor::{Binding, Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::distances::con_dis;
use crate::error::{Error, Result};
use crate::fusion::{sf_forward, SfOptions, SfParams};

/// Per-frame channel map applied inside the motion extractor.
#[derive(Clone, Debug, PartialEq)]
pub enum Phi {
    Bottleneck { down: Linear, up: Linear, activation: Activation },
    Linear(Linear),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfeParams {
    pub phi: Phi,
}

impl MfeParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        reduction: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(Error::Config(format!("reduction ratio {reduction} does not divide width {dim}")));
        }
        let hidden = dim / reduction;
        Ok(Self {
            phi: Phi::Bottleneck {
                down: Linear::new(store, &format!("{name}.down"), dim, hidden, true, std, rng),
                up: Linear::new(store, &format!("{name}.up"), hidden, dim, true, std, rng),
                activation: Activation::Gelu,
            },
        })
    }

    /// `Phi = scale * identity`.
    pub fn scaled_identity<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, scale: f64) -> Self {
        Self { phi: Phi::Linear(Linear::identity(store, name, dim, scale)) }
    }

    fn phi<S: Scalar>(&self, g: &mut Graph<S>, p: &Binding, x: Var) -> Result<Var> {
        Ok(match &self.phi {
            Phi::Bottleneck { down, up, activation } => {
                let h = down.forward(g, p, x)?;
                let h = activation.apply(g, h);
                up.forward(g, p, h)?
            }
            Phi::Linear(l) => l.forward(g, p, x)?,
        })
    }
}

/// Motion token of `frames [B, T, C]` (or `[T, C]`), shaped `[B, 1, C]`
/// (or `[1, C]`): the sum over adjacent pairs of
/// `(Phi(f[t+1]) - f[t]) + (Phi(f[t]) - f[t+1])`.
pub fn mfe<S: Scalar>(g: &mut Graph<S>, p: &Binding, params: &MfeParams, frames: Var) -> Result<Var> {
    let shape = g.shape(frames).to_vec();
    if shape.len() < 2 {
        return Err(Error::Contract(format!("motion extraction expects [.., T, C], got {shape:?}")));
    }
    let axis = shape.len() - 2;
    let t = shape[axis];
    if t < 2 {
        return Err(Error::Contract(format!("motion extraction needs T >= 2 frames, got {t}")));
    }
    let mapped = params.phi(g, p, frames)?;
    let ax = axis as isize;
    let phi_next = g.narrow(mapped, ax, 1, t - 1)?;
    let phi_cur = g.narrow(mapped, ax, 0, t - 1)?;
    let next = g.narrow(frames, ax, 1, t - 1)?;
    let cur = g.narrow(frames, ax, 0, t - 1)?;
    let forward = g.sub(phi_next, cur)?;
    let backward = g.sub(phi_cur, next)?;
    let m = g.add(forward, backward)?;
    Ok(g.sum(m, ax, true)?)
}

/// Which shallow motion token the consistency distance compares to the deep one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    /// The token after fusion with the frames.
    PostFusion,
    /// The token straight out of the shallow extractor.
    PreFusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsmrParams {
    pub shallow: MfeParams,
    pub deep: MfeParams,
    pub sf: SfParams,
}

impl HsmrParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        reduction: usize,
        enc: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            shallow: MfeParams::new(store, &format!("{name}.mfe_shallow"), dim, reduction, enc.init_std, rng)?,
            deep: MfeParams::new(store, &format!("{name}.mfe_deep"), dim, reduction, enc.init_std, rng)?,
            sf: SfParams::new(store, &format!("{name}.sf"), dim, enc, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HsmrOutput {
    /// `[B, 1, C]`, the shallow token after fusion.
    pub shallow: Var,
    /// `[B, 1, C]`, the shallow token before fusion.
    pub shallow_raw: Var,
    /// `[B, 1, C]`.
    pub deep: Var,
    /// `[B, T, C]`.
    pub refined: Var,
    /// `[B]`, consistency distance per sample.
    pub consistency: Var,
}

pub fn hsmr_forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &Binding,
    params: &HsmrParams,
    frames: Var,
    position: Option<Var>,
    opts: SfOptions,
    target: ConsistencyTarget,
) -> Result<HsmrOutput> {
    if g.shape(frames).len() != 3 {
        return Err(Error::Contract(format!("motion refinement expects [B, T, C], got {:?}", g.shape(frames))));
    }
    let shallow_raw = mfe(g, p, &params.shallow, frames)?;
    let fused = sf_forward(g, p, &params.sf, shallow_raw, frames, position, opts)?;
    let deep = mfe(g, p, &params.deep, fused.visual)?;
    let reference = match target {
        ConsistencyTarget::PostFusion => fused.prompt,
        ConsistencyTarget::PreFusion => shallow_raw,
    };
    let consistency = con_dis(g, reference, deep)?;
    Ok(HsmrOutput { shallow: fused.prompt, shallow_raw, deep, refined: fused.visual, consistency })
}
