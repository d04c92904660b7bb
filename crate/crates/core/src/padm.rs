//! Prototype-anchor dual modulation: support samples are modulated against
//! their class prototype, queries against a global anchor.

use fsar_tensor::nn::Encoder;
use fsar_tensor::{Binding, Graph, ParamStore, Scalar, TensorError, Var};
use rand::Rng;

use crate::config::EncoderConfig;
use crate::distances::{pairwise_seq_dis, SeqDisConfig};
use crate::error::Result;
use crate::grouping::{class_means, ClassGroups};

#[derive(Clone, Debug, PartialEq)]
pub struct PadmParams {
    pub prototype_encoder: Encoder,
    pub anchor_encoder: Encoder,
}

impl PadmParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        enc: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore<S>, rng: &mut R, part: &str| {
            Encoder::new(store, &format!("{name}.{part}"), enc.depth, dim, enc.heads, enc.ffn_mult, enc.init_std, rng)
        };
        Ok(Self { prototype_encoder: mk(store, rng, "prototype_encoder")?, anchor_encoder: mk(store, rng, "anchor_encoder")? })
    }

    pub fn zero_residual<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.prototype_encoder.zero_residual(store);
        self.anchor_encoder.zero_residual(store);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PadmOutput {
    /// `[NK, T, C]`.
    pub support: Var,
    /// `[NM, T, C]`.
    pub query: Var,
    /// `[N, T, C]`, class means of the prototype-side encoder outputs.
    pub prototypes: Var,
    /// `[1, T, C]`, mean of the anchor-side encoder outputs over queries.
    pub query_anchor: Var,
    /// `[1, T, C]`.
    pub anchor: Var,
    /// `[N, T, C]`, prototypes before modulation.
    pub initial_prototypes: Var,
}

/// Runs both modulation paths. With `transductive`, every class's initial
/// prototype averages its shots together with all queries; otherwise only
/// the shots.
pub fn padm_forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &Binding,
    params: &PadmParams,
    support: Var,
    labels: &[usize],
    groups: &ClassGroups,
    query: Var,
    transductive: bool,
) -> Result<PadmOutput> {
    let (ss, qs) = (g.shape(support).to_vec(), g.shape(query).to_vec());
    if ss.len() != 3 || qs.len() != 3 || ss[1..] != qs[1..] {
        return Err(TensorError::Dimension(format!("expected [NK,T,C] and [NM,T,C], got {ss:?} and {qs:?}")).into());
    }
    let (t, c, nm, n) = (ss[1], ss[2], qs[0], groups.way);

    let sorted = g.index_select(support, 0, &groups.order)?;
    let grouped = g.reshape(sorted, &[n, groups.shot, t, c])?;
    let initial = if transductive {
        let q = g.reshape(query, &[1, nm, t, c])?;
        let per_class = g.index_select(q, 0, &vec![0; n])?;
        let pooled = g.concat(&[grouped, per_class], 1)?;
        g.mean(pooled, 1, false)?
    } else {
        g.mean(grouped, 1, false)?
    };
    let anchor = g.mean(initial, 0, true)?;

    let own = g.index_select(initial, 0, labels)?;
    let tokens = g.concat(&[own, support], 1)?;
    let enc = params.prototype_encoder.forward(g, p, tokens)?;
    let parts = g.split(enc, &[t, t], 1)?;
    let prototypes = class_means(g, parts[0], groups)?;
    let support_out = parts[1];

    let anchors = g.index_select(anchor, 0, &vec![0; nm])?;
    let tokens = g.concat(&[anchors, query], 1)?;
    let enc = params.anchor_encoder.forward(g, p, tokens)?;
    let parts = g.split(enc, &[t, t], 1)?;
    let query_anchor = g.mean(parts[0], 0, true)?;

    Ok(PadmOutput { support: support_out, query: parts[1], prototypes, query_anchor, anchor, initial_prototypes: initial })
}

/// `[NM, N]` distances: query to modulated class prototype, plus the
/// query-independent prototype-to-anchor term of each class.
pub fn padm_distance<S: Scalar>(
    g: &mut Graph<S>,
    out: &PadmOutput,
    groups: &ClassGroups,
    cfg: &SeqDisConfig,
) -> Result<Var> {
    let protos = class_means(g, out.support, groups)?;
    let sample_term = pairwise_seq_dis(g, out.query, protos, cfg)?;
    let anchor_term = pairwise_seq_dis(g, out.query_anchor, out.prototypes, cfg)?;
    Ok(g.add(sample_term, anchor_term)?)
}
