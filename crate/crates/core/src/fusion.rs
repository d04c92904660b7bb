//! Semantic fusion: a prompt token and frame tokens are contextualized jointly
//! by a transformer encoder, then recombined per [`FusionStrategy`].

use fsar_tensor::nn::{Encoder, Linear};
use fsar_tensor::{Binding, Graph, ParamStore, Scalar, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Contextualized streams as they leave the encoder.
    Concat,
    /// Contextualized streams plus the input streams.
    ConcatSum,
    /// Gated mixture of both streams plus the input streams.
    ConcatSumGate,
}

/// Which features the gate networks read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    Encoded,
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfOptions {
    pub strategy: FusionStrategy,
    pub gate_source: GateSource,
}

impl Default for SfOptions {
    fn default() -> Self {
        Self { strategy: FusionStrategy::ConcatSumGate, gate_source: GateSource::Encoded }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfParams {
    pub encoder: Encoder,
    pub visual_gate: Linear,
    pub prompt_gate: Linear,
    pub dim: usize,
}

impl SfParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        enc: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(
                store,
                &format!("{name}.encoder"),
                enc.depth,
                dim,
                enc.heads,
                enc.ffn_mult,
                enc.init_std,
                rng,
            )?,
            visual_gate: Linear::new(store, &format!("{name}.visual_gate"), dim, dim, true, enc.init_std, rng),
            prompt_gate: Linear::new(store, &format!("{name}.prompt_gate"), dim, dim, true, enc.init_std, rng),
            dim,
        })
    }

    /// Pins both gates to constants `sigmoid(visual_bias)` and
    /// `sigmoid(prompt_bias)`.
    pub fn pin_gates<S: Scalar>(&self, store: &mut ParamStore<S>, visual_bias: f64, prompt_bias: f64) {
        for (gate, b) in [(&self.visual_gate, visual_bias), (&self.prompt_gate, prompt_bias)] {
            gate.zero(store);
            if let Some(id) = gate.bias {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = S::lit(b));
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SfOutput {
    pub prompt: Var,
    pub visual: Var,
}

/// Fuses `prompt [B, P, C]` with `visual [B, T, C]` (or the unbatched
/// `[P, C]`, `[T, C]`). `position [T, C]`, when given, is added to the visual
/// tokens first. Outputs have the input shapes.
pub fn sf_forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &Binding,
    params: &SfParams,
    prompt: Var,
    visual: Var,
    position: Option<Var>,
    opts: SfOptions,
) -> Result<SfOutput> {
    let (ps, vs) = (g.shape(prompt).to_vec(), g.shape(visual).to_vec());
    let unbatched = ps.len() == 2 && vs.len() == 2;
    let (prompt, visual) = if unbatched {
        (g.unsqueeze(prompt, 0)?, g.unsqueeze(visual, 0)?)
    } else {
        (prompt, visual)
    };
    let (ps3, vs3) = (g.shape(prompt).to_vec(), g.shape(visual).to_vec());
    if ps3.len() != 3 || vs3.len() != 3 || ps3[0] != vs3[0] || ps3[2] != params.dim || vs3[2] != params.dim {
        return Err(TensorError::Dimension(format!(
            "fusion expects [B,P,{c}] and [B,T,{c}], got {ps:?} and {vs:?}",
            c = params.dim
        ))
        .into());
    }
    let (np, nt) = (ps3[1], vs3[1]);
    let visual = match position {
        Some(pos) => g.add(visual, pos)?,
        None => visual,
    };
    let tokens = g.concat(&[prompt, visual], 1)?;
    let encoded = params.encoder.forward(g, p, tokens)?;
    let parts = g.split(encoded, &[np, nt], 1)?;
    let (pe, ve) = (parts[0], parts[1]);

    let (po, vo) = match opts.strategy {
        FusionStrategy::Concat => (pe, ve),
        FusionStrategy::ConcatSum => (g.add(pe, prompt)?, g.add(ve, visual)?),
        FusionStrategy::ConcatSumGate => {
            let (gv_in, gp_in) = match opts.gate_source {
                GateSource::Encoded => (ve, pe),
                GateSource::Input => (visual, prompt),
            };
            let gv = params.visual_gate.forward(g, p, gv_in)?;
            let gv = g.sigmoid(gv);
            let gp = params.prompt_gate.forward(g, p, gp_in)?;
            let gp = g.sigmoid(gp);
            let v_term = g.mul(gv, ve)?;
            let p_term = g.mul(gp, pe)?;
            let p_bcast = g.mean(p_term, 1, true)?;
            let v_pool = g.mean(v_term, 1, true)?;
            let vo = g.add(v_term, p_bcast)?;
            let vo = g.add(vo, visual)?;
            let po = g.add(p_term, v_pool)?;
            let po = g.add(po, prompt)?;
            (po, vo)
        }
    };
    if unbatched {
        Ok(SfOutput { prompt: g.reshape(po, &ps)?, visual: g.reshape(vo, &vs)? })
    } else {
        Ok(SfOutput { prompt: po, visual: vo })
    }
}

#[cfg(test)]
mod tests {
    use fsar_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(dim: usize) -> (ParamStore<f64>, SfParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = EncoderConfig { depth: 1, heads: 2, ffn_mult: 4, init_std: 0.2 };
        let sf = SfParams::new(&mut store, "sf", dim, &enc, &mut rng).unwrap();
        (store, sf, rng)
    }

    fn run(store: &ParamStore<f64>, sf: &SfParams, pr: &Tensor<f64>, vi: &Tensor<f64>, s: FusionStrategy) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let b = g.bind(store, false);
        let pv = g.constant(pr);
        let vv = g.constant(vi);
        let opts = SfOptions { strategy: s, gate_source: GateSource::Encoded };
        let out = sf_forward(&mut g, &b, sf, pv, vv, None, opts).unwrap();
        assert_eq!(g.shape(out.prompt), pr.shape());
        assert_eq!(g.shape(out.visual), vi.shape());
        (g.data(out.prompt).to_vec(), g.data(out.visual).to_vec())
    }

    #[test]
    fn zero_residual_concat_is_identity() {
        let (mut store, sf, mut rng) = setup(4);
        sf.encoder.zero_residual(&mut store);
        let pr = Tensor::randn(vec![2, 1, 4], 1.0, &mut rng);
        let vi = Tensor::randn(vec![2, 8, 4], 1.0, &mut rng);
        let (po, vo) = run(&store, &sf, &pr, &vi, FusionStrategy::Concat);
        assert_eq!(po, pr.data());
        assert_eq!(vo, vi.data());
    }

    #[test]
    fn pinned_gates_reduce_to_sum_exactly() {
        let (mut store, sf, mut rng) = setup(4);
        sf.pin_gates(&mut store, 1000.0, -1000.0);
        let pr = Tensor::randn(vec![3, 1, 4], 1.0, &mut rng);
        let vi = Tensor::randn(vec![3, 8, 4], 1.0, &mut rng);
        let (_, gated) = run(&store, &sf, &pr, &vi, FusionStrategy::ConcatSumGate);
        let (_, summed) = run(&store, &sf, &pr, &vi, FusionStrategy::ConcatSum);
        assert_eq!(gated, summed);
    }

    #[test]
    fn unbatched_inputs_keep_their_shape() {
        let (store, sf, mut rng) = setup(4);
        let pr = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let vi = Tensor::randn(vec![8, 4], 1.0, &mut rng);
        for s in [FusionStrategy::Concat, FusionStrategy::ConcatSum, FusionStrategy::ConcatSumGate] {
            run(&store, &sf, &pr, &vi, s);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (store, sf, _) = setup(4);
        let mut g = Graph::new();
        let b = g.bind(&store, false);
        let pv = g.constant(&Tensor::<f64>::zeros(vec![1, 1, 3]));
        let vv = g.constant(&Tensor::<f64>::zeros(vec![1, 8, 3]));
        let err = sf_forward(&mut g, &b, &sf, pv, vv, None, SfOptions::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Tensor(TensorError::Dimension(_))));
    }
}
