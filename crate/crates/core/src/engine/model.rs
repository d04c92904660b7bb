use fsar_tensor::nn::LayerNorm;
use fsar_tensor::{Binding, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::dataset::Episode;
use crate::distances::{class_probabilities_var, combined_distance, pairwise_seq_dis};
use crate::error::{Error, Result};
use crate::grouping::{class_groups, class_means};
use crate::hsmr::{hsmr_forward, HsmrParams};
use crate::padm::{padm_distance, padm_forward, PadmOutput, PadmParams};
use crate::spm::{spm_forward, Mode, SpmInputs, SpmParams};

/// Where each module's parameters live in the [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub frame_norm: LayerNorm,
    pub prompt_norm: LayerNorm,
    /// Learned `[T, C]` frame position embedding.
    pub position: ParamId,
    pub hsmr: HsmrParams,
    pub spm: SpmParams,
    pub padm: PadmParams,
}

impl ModelLayout {
    /// Registers every parameter of `config` in `store`, drawing initial
    /// values from a generator seeded with `config.seeds.init`.
    pub fn build<S: Scalar>(config: &ModelConfig, store: &mut ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.init);
        let (c, enc) = (config.channels, &config.encoder);
        Ok(Self {
            frame_norm: LayerNorm::new(store, "input.frame_norm", c),
            prompt_norm: LayerNorm::new(store, "input.prompt_norm", c),
            position: store.add("input.position", Tensor::randn(vec![config.frames, c], enc.init_std, &mut rng)),
            hsmr: HsmrParams::new(store, "hsmr", c, config.mfe_reduction, enc, &mut rng)?,
            spm: SpmParams::new(store, "spm", c, config.pg_depth, enc, &mut rng)?,
            padm: PadmParams::new(store, "padm", c, enc, &mut rng)?,
        })
    }
}

/// Configuration, parameter layout and parameter values.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<S>,
}

/// Episode tensors placed on a graph.
#[derive(Clone, Debug)]
pub struct EpisodeInputs {
    /// `[NK, T, C]`.
    pub support: Var,
    /// `[NM, T, C]`.
    pub query: Var,
    /// `[NK, 1, C]`.
    pub support_prompts: Var,
    /// `[NM, 1, C]`, read only in training.
    pub query_prompts: Var,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub way: usize,
}

impl EpisodeInputs {
    pub fn constants<S: Scalar>(g: &mut Graph<S>, ep: &Episode) -> Result<Self> {
        let (t, c) = (ep.frames, ep.channels);
        let conv = |v: Vec<f32>| v.into_iter().map(|x| S::lit(f64::from(x))).collect::<Vec<S>>();
        let (nk, nm) = (ep.support.len(), ep.query.len());
        Ok(Self {
            support: g.constant_from(vec![nk, t, c], conv(ep.support_frames()))?,
            query: g.constant_from(vec![nm, t, c], conv(ep.query_frames()))?,
            support_prompts: g.constant_from(vec![nk, 1, c], conv(ep.support_prompts()))?,
            query_prompts: g.constant_from(vec![nm, 1, c], conv(ep.query_prompts()))?,
            support_labels: ep.support_labels(),
            query_labels: ep.query_labels(),
            way: ep.shape.way,
        })
    }
}

/// Nodes of one episode's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeGraph {
    /// `[NM, N]` combined distances.
    pub distances: Var,
    pub d_padm: Var,
    pub d_spm: Var,
    /// `[NM, N]`.
    pub probabilities: Var,
    pub ce: Var,
    pub l_h: Var,
    pub l_s: Var,
    pub total: Var,
}

fn distance_features<S: Scalar>(g: &mut Graph<S>, x: Var, on: bool) -> Result<Var> {
    if on {
        Ok(g.layernorm(x, None, None, fsar_tensor::nn::LAYERNORM_EPS)?)
    } else {
        Ok(x)
    }
}

/// Builds the forward pass of one episode. Query labels are read only by the
/// loss; query prompts only by training-mode consistency.
pub fn episode_graph<S: Scalar>(
    g: &mut Graph<S>,
    p: &Binding,
    layout: &ModelLayout,
    cfg: &ModelConfig,
    inputs: &EpisodeInputs,
    mode: Mode,
) -> Result<EpisodeGraph> {
    let groups = class_groups(&inputs.support_labels, inputs.way)?;
    let (nk, nm) = (inputs.support_labels.len(), inputs.query_labels.len());
    let shape = g.shape(inputs.support).to_vec();
    if shape.len() != 3 || shape[1] != cfg.frames || shape[2] != cfg.channels {
        return Err(Error::Contract(format!(
            "episode frames {shape:?} do not match T={} C={}",
            cfg.frames, cfg.channels
        )));
    }

    let frames = g.concat(&[inputs.support, inputs.query], 0)?;
    let frames = layout.frame_norm.forward(g, p, frames)?;
    let frames = g.add(frames, p.var(layout.position))?;
    let prompts = g.concat(&[inputs.support_prompts, inputs.query_prompts], 0)?;
    let prompts = layout.prompt_norm.forward(g, p, prompts)?;

    let zero = g.constant_from(vec![], vec![S::zero()])?;
    let (frames, l_h) = if cfg.components.hsmr {
        let out = hsmr_forward(g, p, &layout.hsmr, frames, None, cfg.fusion, cfg.hsmr_target)?;
        (out.refined, g.sum_all(out.consistency))
    } else {
        (frames, zero)
    };
    let parts = g.split(frames, &[nk, nm], 0)?;
    let (support, query) = (parts[0], parts[1]);
    let parts = g.split(prompts, &[nk, nm], 0)?;

    let (support, query, l_s) = if cfg.components.spm {
        let spm_in = SpmInputs {
            support,
            query,
            support_prompts: parts[0],
            query_prompts: (mode == Mode::Train && cfg.constraint.query()).then_some(parts[1]),
            learned_override: None,
        };
        let out = spm_forward(g, p, &layout.spm, &spm_in, mode, cfg.constraint, cfg.fusion)?;
        (out.support, out.query, out.consistency)
    } else {
        (support, query, zero)
    };

    let norm = cfg.distance_norm;
    let protos = class_means(g, support, &groups)?;
    let protos_n = distance_features(g, protos, norm)?;
    let query_n = distance_features(g, query, norm)?;
    let d_spm = pairwise_seq_dis(g, query_n, protos_n, &cfg.seq_dis)?;

    let d_padm = if cfg.components.padm {
        let out = padm_forward(g, p, &layout.padm, support, &inputs.support_labels, &groups, query, cfg.transductive)?;
        let normed = PadmOutput {
            support: distance_features(g, out.support, norm)?,
            query: distance_features(g, out.query, norm)?,
            prototypes: distance_features(g, out.prototypes, norm)?,
            query_anchor: distance_features(g, out.query_anchor, norm)?,
            ..out
        };
        padm_distance(g, &normed, &groups, &cfg.seq_dis)?
    } else {
        d_spm
    };

    let distances = combined_distance(g, d_padm, d_spm, &cfg.distance)?;
    let probabilities = class_probabilities_var(g, distances)?;
    let neg = g.neg(distances);
    let logp = g.log_softmax(neg, -1)?;
    let n = inputs.way;
    let flat = g.reshape(logp, &[nm * n])?;
    let picks: Vec<usize> = inputs.query_labels.iter().enumerate().map(|(j, &l)| j * n + l).collect();
    let picked = g.index_select(flat, 0, &picks)?;
    let mean = g.mean_all(picked);
    let ce = g.neg(mean);

    let wh = g.scale(l_h, cfg.lambda3);
    let ws = g.scale(l_s, cfg.lambda4);
    let total = g.add(ce, wh)?;
    let total = g.add(total, ws)?;
    Ok(EpisodeGraph { distances, d_padm, d_spm, probabilities, ce, l_h, l_s, total })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub probabilities: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub h: f64,
    pub s: f64,
    pub total: f64,
}

impl LossComponents {
    /// Name of the first non-finite component.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [("L_CE", self.ce), ("L_H", self.h), ("L_S", self.s), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k)
    }
}

fn read_out<S: Scalar>(g: &Graph<S>, eg: &EpisodeGraph, labels: &[usize]) -> (PredictionResult, LossComponents) {
    let n = g.shape(eg.probabilities)[1];
    let probabilities: Vec<Vec<f64>> =
        g.data(eg.probabilities).chunks(n).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    let predicted: Vec<usize> = probabilities
        .iter()
        .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i))
        .collect();
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    let losses = LossComponents {
        ce: g.item(eg.ce).as_f64(),
        h: g.item(eg.l_h).as_f64(),
        s: g.item(eg.l_s).as_f64(),
        total: g.item(eg.total).as_f64(),
    };
    let accuracy = hits as f64 / labels.len() as f64;
    (PredictionResult { probabilities, predicted, labels: labels.to_vec(), accuracy }, losses)
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = ModelLayout::build(&config, &mut params)?;
        Ok(Self { config, layout, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    fn check_episode(&self, ep: &Episode) -> Result<()> {
        if ep.frames != self.config.frames || ep.channels != self.config.channels {
            return Err(Error::Contract(format!(
                "episode has T={} C={}, model expects T={} C={}",
                ep.frames, ep.channels, self.config.frames, self.config.channels
            )));
        }
        Ok(())
    }

    /// Forward pass with frozen parameters.
    pub fn forward_episode(&self, ep: &Episode, mode: Mode) -> Result<(PredictionResult, LossComponents)> {
        self.check_episode(ep)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let inputs = EpisodeInputs::constants(&mut g, ep)?;
        let eg = episode_graph(&mut g, &p, &self.layout, &self.config, &inputs, mode)?;
        let out = read_out(&g, &eg, &inputs.query_labels);
        if let Some(k) = out.1.first_non_finite() {
            return Err(Error::Numeric(format!("{k} is not finite")));
        }
        Ok(out)
    }

    /// Training-mode forward and backward; returns the gradient of the total
    /// loss for every parameter in store order.
    pub fn episode_gradients(&self, ep: &Episode) -> Result<(PredictionResult, LossComponents, Vec<Vec<S>>)> {
        self.check_episode(ep)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, true);
        let inputs = EpisodeInputs::constants(&mut g, ep)?;
        let eg = episode_graph(&mut g, &p, &self.layout, &self.config, &inputs, Mode::Train)?;
        let (pred, losses) = read_out(&g, &eg, &inputs.query_labels);
        if let Some(k) = losses.first_non_finite() {
            return Err(Error::Numeric(format!("{k} is not finite")));
        }
        g.backward(eg.total)?;
        let grads = g.param_grads(&self.params, &p);
        Ok((pred, losses, grads))
    }
}
