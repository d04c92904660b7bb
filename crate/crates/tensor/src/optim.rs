//! Adam with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-5 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub first: Vec<Vec<S>>,
    pub second: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<S>> = store.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Nothing was updated because a gradient entry of this parameter was not finite.
    SkippedNonFinite { param: String },
}

/// One AdamW update. Moments and step counter are left untouched when the step is skipped.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    if grads.len() != store.len() || state.first.len() != store.len() || state.second.len() != store.len() {
        return Err(TensorError::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            store.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        let n = store.get(id).numel();
        if g.len() != n || state.first[id.index()].len() != n || state.second[id.index()].len() != n {
            return Err(TensorError::Dimension(format!(
                "adam: parameter {} has {n} elements, gradient {}",
                store.name(id),
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite { param: store.name(id).to_string() });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let bias1 = S::one() - b1.powi(t);
    let bias2 = S::one() - b2.powi(t);
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    let decay = S::lit(cfg.lr * cfg.weight_decay);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let g = &grads[i];
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] = p[j] - decay * p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
