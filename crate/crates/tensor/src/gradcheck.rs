//! Central finite-difference checks of analytic gradients.
//!
//! The checker only ever evaluates the forward function; the backward pass is
//! compared against it, never used to produce the reference.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, SCALE_FLOOR)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() <= tol
    }
}

/// Differentiates `f` with respect to every element of `inputs`.
///
/// A non-scalar output is reduced to a scalar through a fixed random
/// projection so every output element contributes.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(&t.clone().with_requires_grad(true))).collect();
        let out = f(&mut g, &vars)?;
        let proj = projection.get_or_insert_with(|| {
            let mut rng = StdRng::seed_from_u64(0x6772_6164);
            Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng)
        });
        if proj.shape() != g.shape(out) {
            return Err(TensorError::Dimension("output shape changed between evaluations".into()));
        }
        let w = g.constant(proj);
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod);
        let value = g.item(loss);
        let mut grads = Vec::new();
        if want_grad {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(xs) {
                grads.push(g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * step);
        }
        relative_errors.push(relative_error(a, &numeric));
    }
    Ok(GradCheckReport { relative_errors })
}

/// Below this gradient norm the error is measured in absolute terms; inputs
/// with an analytically zero gradient (e.g. key biases under softmax) would
/// otherwise compare rounding noise against rounding noise.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(SCALE_FLOOR)
}
