//! Semantic prototype modulation: prompts are generated from the episode's
//! class prompts and each sample's frames, fused with the frames, and held
//! consistent with the fusion of the real class prompts.

use fsar_tensor::nn::{Activation, Linear};
use fsar_tensor::{Binding, Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::distances::con_dis;
use crate::error::{Error, Result};
use crate::fusion::{sf_forward, SfOptions, SfParams};
use crate::grouping::{class_means, ClassGroups};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    Support,
    Query,
    Both,
}

impl ConstraintMode {
    pub fn support(self) -> bool {
        matches!(self, ConstraintMode::Support | ConstraintMode::Both)
    }

    pub fn query(self) -> bool {
        matches!(self, ConstraintMode::Query | ConstraintMode::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Prompt generator: a stack of affine layers with an activation between them.
#[derive(Clone, Debug, PartialEq)]
pub struct PgParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl PgParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        depth: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("prompt generator needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|i| Linear::new(store, &format!("{name}.layer{i}"), dim, dim, true, std, rng))
            .collect();
        Ok(Self { layers, activation: Activation::Gelu })
    }

    /// A single identity layer.
    pub fn identity<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self { layers: vec![Linear::identity(store, &format!("{name}.layer0"), dim, 1.0)], activation: Activation::Gelu }
    }
}

/// `Upsilon(mean(episode_prompts) * mean_T(visual_b))` for every sample:
/// `[NK, 1, C] x [B, T, C] -> [B, 1, C]`.
pub fn prompt_generate<S: Scalar>(
    g: &mut Graph<S>,
    p: &Binding,
    pg: &PgParams,
    episode_prompts: Var,
    visuals: Var,
) -> Result<Var> {
    let ps = g.shape(episode_prompts).to_vec();
    let c = *ps.last().unwrap_or(&0);
    let n = if c == 0 { 0 } else { ps.iter().product::<usize>() / c };
    if n == 0 {
        return Err(Error::Contract("prompt generation needs at least one episode prompt".into()));
    }
    let flat = g.reshape(episode_prompts, &[n, c])?;
    let mean_prompt = g.mean(flat, 0, true)?;
    let mean_frame = g.mean(visuals, 1, true)?;
    let mut h = g.mul(mean_frame, mean_prompt)?;
    for (i, layer) in pg.layers.iter().enumerate() {
        if i > 0 {
            h = pg.activation.apply(g, h);
        }
        h = layer.forward(g, p, h)?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpmParams {
    pub sf: SfParams,
    pub pg: PgParams,
}

impl SpmParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        pg_depth: usize,
        enc: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            sf: SfParams::new(store, &format!("{name}.sf"), dim, enc, rng)?,
            pg: PgParams::new(store, &format!("{name}.pg"), dim, pg_depth, enc.init_std, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpmInputs {
    /// `[NK, T, C]`.
    pub support: Var,
    /// `[NM, T, C]`.
    pub query: Var,
    /// `[NK, 1, C]`, aggregated class prompt of every support item.
    pub support_prompts: Var,
    /// `[NM, 1, C]`, ground-truth class prompts of the queries (training only).
    pub query_prompts: Option<Var>,
    /// Replaces the generated prompts (`[NK, 1, C]`, `[NM, 1, C]`).
    pub learned_override: Option<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct SpmOutput {
    /// `[NK, T, C]`, support frames fused with their real class prompts.
    pub support: Var,
    /// `[NM, T, C]`, query frames fused with their generated prompts.
    pub query: Var,
    pub generated_support: Var,
    pub generated_query: Var,
    pub real_support_prompts: Var,
    pub learned_support_prompts: Option<Var>,
    pub real_query_prompts: Option<Var>,
    pub learned_query_prompts: Var,
    /// `[NK]`.
    pub support_consistency: Option<Var>,
    /// `[NM]`.
    pub query_consistency: Option<Var>,
    /// Sum of the enabled per-sample consistency distances.
    pub consistency: Var,
}

fn pair_consistency<S: Scalar>(
    g: &mut Graph<S>,
    real_prompt: Var,
    real_visual: Var,
    learned_prompt: Var,
    learned_visual: Var,
) -> Result<Var> {
    let prompt_level = con_dis(g, real_prompt, learned_prompt)?;
    let real = g.concat(&[real_prompt, real_visual], 1)?;
    let learned = g.concat(&[learned_prompt, learned_visual], 1)?;
    let sequence_level = con_dis(g, real, learned)?;
    Ok(g.add(prompt_level, sequence_level)?)
}

/// All fusion passes run as one batched call through the shared fusion block.
pub fn spm_forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &Binding,
    params: &SpmParams,
    inputs: &SpmInputs,
    mode: Mode,
    constraint: ConstraintMode,
    opts: SfOptions,
) -> Result<SpmOutput> {
    let nk = g.shape(inputs.support)[0];
    let nm = g.shape(inputs.query)[0];
    if mode == Mode::Test && inputs.query_prompts.is_some() {
        return Err(Error::Contract("query class prompts are unavailable at test time".into()));
    }
    let query_pass = mode == Mode::Train && constraint.query();
    if query_pass && inputs.query_prompts.is_none() {
        return Err(Error::Contract("query consistency in training needs the query class prompts".into()));
    }

    let generated_support = prompt_generate(g, p, &params.pg, inputs.support_prompts, inputs.support)?;
    let generated_query = prompt_generate(g, p, &params.pg, inputs.support_prompts, inputs.query)?;
    let (learned_s, learned_q) = inputs.learned_override.unwrap_or((generated_support, generated_query));

    let mut prompts = vec![inputs.support_prompts, learned_q];
    let mut visuals = vec![inputs.support, inputs.query];
    let mut sizes = vec![nk, nm];
    if constraint.support() {
        prompts.push(learned_s);
        visuals.push(inputs.support);
        sizes.push(nk);
    }
    if query_pass {
        prompts.push(inputs.query_prompts.expect("checked above"));
        visuals.push(inputs.query);
        sizes.push(nm);
    }
    let prompt_batch = g.concat(&prompts, 0)?;
    let visual_batch = g.concat(&visuals, 0)?;
    let fused = sf_forward(g, p, &params.sf, prompt_batch, visual_batch, None, opts)?;
    let pp = g.split(fused.prompt, &sizes, 0)?;
    let vv = g.split(fused.visual, &sizes, 0)?;

    let mut consistency = g.constant_from(vec![], vec![S::zero()])?;
    let mut next = 2;
    let mut learned_support_prompts = None;
    let mut support_consistency = None;
    if constraint.support() {
        let d = pair_consistency(g, pp[0], vv[0], pp[next], vv[next])?;
        let s = g.sum_all(d);
        consistency = g.add(consistency, s)?;
        learned_support_prompts = Some(pp[next]);
        support_consistency = Some(d);
        next += 1;
    }
    let mut real_query_prompts = None;
    let mut query_consistency = None;
    if query_pass {
        let d = pair_consistency(g, pp[next], vv[next], pp[1], vv[1])?;
        let s = g.sum_all(d);
        consistency = g.add(consistency, s)?;
        real_query_prompts = Some(pp[next]);
        query_consistency = Some(d);
    }
    Ok(SpmOutput {
        support: vv[0],
        query: vv[1],
        generated_support,
        generated_query,
        real_support_prompts: pp[0],
        learned_support_prompts,
        real_query_prompts,
        learned_query_prompts: pp[1],
        support_consistency,
        query_consistency,
        consistency,
    })
}

/// Per-class mean over the shots: `[NK, T, C] -> [N, T, C]`.
pub fn spm_prototypes<S: Scalar>(g: &mut Graph<S>, support: Var, groups: &ClassGroups) -> Result<Var> {
    class_means(g, support, groups)
}
