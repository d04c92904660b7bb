//! Finite-difference agreement of every differentiable operation and of a
//! whole training episode, in double precision.

use fsar_tensor::gradcheck::{check, GradCheckReport};
use fsar_tensor::nn::{Encoder, MultiHeadAttention};
use fsar_tensor::{Binding, Graph, ParamStore, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, ModelConfig};
use crate::dataset::{synth_dataset, EpisodeSampler, EpisodeShape, Split, SynthConfig};
use crate::distances::{class_probabilities_var, con_dis, seq_dis, soft_otam, SeqDisConfig};
use crate::engine::{episode_graph, episode_rng, EpisodeInputs, Model};
use crate::error::Result;
use crate::fusion::{sf_forward, FusionStrategy, GateSource, SfOptions, SfParams};
use crate::grouping::class_groups;
use crate::hsmr::{hsmr_forward, mfe, ConsistencyTarget, HsmrParams, MfeParams};
use crate::padm::{padm_distance, padm_forward, PadmParams};
use crate::spm::{prompt_generate, spm_forward, ConstraintMode, Mode, SpmInputs, SpmParams};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn with_params(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    v.extend(extra);
    v
}

/// Splits checker leaves into a parameter binding and the remaining inputs.
fn split_leaves(vars: &[Var], n_params: usize) -> (Binding, &[Var]) {
    (Binding::from_vars(vars[..n_params].to_vec()), &vars[n_params..])
}

struct Suite {
    cases: Vec<GradCase>,
}

impl Suite {
    fn record(&mut self, name: &str, tolerance: f64, report: std::result::Result<GradCheckReport, TensorError>) -> Result<()> {
        let report = report?;
        self.cases.push(GradCase { name: name.to_string(), max_error: report.max_error(), tolerance });
        Ok(())
    }

    fn op<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> fsar_tensor::Result<Var>,
    {
        self.record(name, OP_TOLERANCE, check(inputs, STEP, f))
    }
}

fn tensor_ops(s: &mut Suite) -> Result<()> {
    s.op("matmul", &[rand(&[3, 2, 4], 1), rand(&[4, 3], 2)], |g, x| g.matmul(x[0], x[1]))?;
    s.op("add", &[rand(&[1, 6], 3), rand(&[4, 6], 4)], |g, x| g.add(x[0], x[1]))?;
    s.op("sub", &[rand(&[1, 6], 3), rand(&[4, 6], 4)], |g, x| g.sub(x[0], x[1]))?;
    s.op("mul", &[rand(&[1, 6], 3), rand(&[4, 6], 4)], |g, x| g.mul(x[0], x[1]))?;
    let denom = Tensor::from_f64(vec![4, 1], &[1.5, -2.0, 3.0, 0.7])?;
    s.op("div", &[rand(&[4, 6], 5), denom], |g, x| g.div(x[0], x[1]))?;
    let x = rand(&[3, 4], 6);
    s.op("sigmoid", &[x.clone()], |g, v| Ok(g.sigmoid(v[0])))?;
    s.op("gelu", &[x.clone()], |g, v| Ok(g.gelu(v[0])))?;
    s.op("exp", &[x.clone()], |g, v| Ok(g.exp(v[0])))?;
    s.op("scale and shift", &[x.clone()], |g, v| {
        let a = g.scale(v[0], -0.3);
        let b = g.neg(a);
        Ok(g.add_scalar(b, 2.0))
    })?;
    s.op("log", &[Tensor::from_f64(vec![3], &[0.5, 1.5, 4.0])?], |g, v| Ok(g.log(v[0])))?;
    let x = rand(&[2, 3, 4], 7);
    s.op("sum", &[x.clone()], |g, v| g.sum(v[0], 1, false))?;
    s.op("mean", &[x.clone()], |g, v| g.mean(v[0], 2, true))?;
    s.op("concat", &[x.clone(), rand(&[2, 2, 4], 8)], |g, v| g.concat(&[v[0], v[1]], 1))?;
    s.op("split", &[x.clone()], |g, v| {
        let parts = g.split(v[0], &[1, 3], -1)?;
        let b = g.sum(parts[1], -1, true)?;
        g.mul(parts[0], b)
    })?;
    s.op("permute", &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]))?;
    s.op("index_select", &[x.clone()], |g, v| g.index_select(v[0], 1, &[2, 0, 2]))?;
    let x = rand(&[3, 5], 9);
    s.op("softmax", &[x.clone()], |g, v| g.softmax(v[0], 1))?;
    s.op("log_softmax", &[x.clone()], |g, v| g.log_softmax(v[0], 0))?;
    s.op("l2norm", &[x.clone()], |g, v| g.l2norm(v[0], 1, false))?;
    s.op("normalize", &[x.clone()], |g, v| g.normalize(v[0], 1))?;
    s.op("layernorm", &[x, rand(&[5], 10), rand(&[5], 11)], |g, v| g.layernorm(v[0], Some(v[1]), Some(v[2]), 1e-5))?;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, 0.4, &mut rng)?;
    let n = store.len();
    s.op("attention", &with_params(&store, vec![rand(&[3, 8], 13)]), |g, v| {
        let (p, x) = split_leaves(v, n);
        attn.forward(g, &p, x[0])
    })?;
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", 1, 8, 2, 4, 0.4, &mut rng)?;
    let n = store.len();
    s.op("encoder", &with_params(&store, vec![rand(&[2, 3, 8], 14)]), |g, v| {
        let (p, x) = split_leaves(v, n);
        enc.forward(g, &p, x[0])
    })
}

fn model_ops(s: &mut Suite) -> Result<()> {
    let cfg = SeqDisConfig::default();
    s.op("soft alignment", &[rand(&[2, 4, 3], 20)], |g, v| Ok(soft_otam(g, v[0], cfg.gamma)?))?;
    s.op("sequence distance", &[rand(&[4, 6], 21), rand(&[3, 6], 22)], |g, v| Ok(seq_dis(g, v[0], v[1], &cfg)?))?;
    s.op("consistency distance", &[rand(&[2, 4, 8], 23), rand(&[2, 4, 8], 24)], |g, v| Ok(con_dis(g, v[0], v[1])?))?;
    s.op("class probabilities", &[rand(&[3, 5], 25)], |g, v| Ok(class_probabilities_var(g, v[0])?))?;

    let enc = EncoderConfig { depth: 1, heads: 2, ffn_mult: 2, init_std: 0.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for (name, strategy, source) in [
        ("fusion concat", FusionStrategy::Concat, GateSource::Encoded),
        ("fusion sum", FusionStrategy::ConcatSum, GateSource::Encoded),
        ("fusion gate", FusionStrategy::ConcatSumGate, GateSource::Encoded),
        ("fusion input gate", FusionStrategy::ConcatSumGate, GateSource::Input),
    ] {
        let mut store = ParamStore::<f64>::new();
        let sf = SfParams::new(&mut store, "sf", 4, &enc, &mut rng)?;
        let n = store.len();
        let opts = SfOptions { strategy, gate_source: source };
        let inputs = with_params(&store, vec![rand(&[2, 1, 4], 27), rand(&[2, 3, 4], 28), rand(&[3, 4], 29)]);
        s.op(name, &inputs, |g, v| {
            let (p, x) = split_leaves(v, n);
            let out = sf_forward(g, &p, &sf, x[0], x[1], Some(x[2]), opts)?;
            g.concat(&[out.prompt, out.visual], 1)
        })?;
    }

    let mut store = ParamStore::<f64>::new();
    let m = MfeParams::new(&mut store, "mfe", 4, 2, 0.5, &mut rng)?;
    let n = store.len();
    s.op("motion token", &with_params(&store, vec![rand(&[2, 4, 4], 30)]), |g, v| {
        let (p, x) = split_leaves(v, n);
        Ok(mfe(g, &p, &m, x[0])?)
    })?;

    let mut store = ParamStore::<f64>::new();
    let h = HsmrParams::new(&mut store, "hsmr", 4, 2, &enc, &mut rng)?;
    let n = store.len();
    s.op("motion refinement", &with_params(&store, vec![rand(&[2, 3, 4], 31)]), |g, v| {
        let (p, x) = split_leaves(v, n);
        let out = hsmr_forward(g, &p, &h, x[0], None, SfOptions::default(), ConsistencyTarget::PostFusion)?;
        let c = g.reshape(out.consistency, &[2, 1, 1])?;
        let c = g.index_select(c, 2, &[0, 0, 0, 0])?;
        g.concat(&[out.refined, c], 1)
    })?;

    let mut store = ParamStore::<f64>::new();
    let spm = SpmParams::new(&mut store, "spm", 4, 2, &enc, &mut rng)?;
    let n = store.len();
    s.op("prompt generator", &with_params(&store, vec![rand(&[3, 1, 4], 32), rand(&[2, 3, 4], 33)]), |g, v| {
        let (p, x) = split_leaves(v, n);
        Ok(prompt_generate(g, &p, &spm.pg, x[0], x[1])?)
    })?;
    let extra = vec![rand(&[2, 3, 4], 34), rand(&[2, 3, 4], 35), rand(&[2, 1, 4], 36), rand(&[2, 1, 4], 37)];
    s.op("prompt modulation", &with_params(&store, extra), |g, v| {
        let (p, x) = split_leaves(v, n);
        let inputs = SpmInputs {
            support: x[0],
            query: x[1],
            support_prompts: x[2],
            query_prompts: Some(x[3]),
            learned_override: None,
        };
        let out = spm_forward(g, &p, &spm, &inputs, Mode::Train, ConstraintMode::Both, SfOptions::default())?;
        let both = g.concat(&[out.support, out.query], 0)?;
        let l = g.reshape(out.consistency, &[1, 1, 1])?;
        let both = g.add(both, l)?;
        Ok(both)
    })?;

    let mut store = ParamStore::<f64>::new();
    let padm = PadmParams::new(&mut store, "padm", 4, &enc, &mut rng)?;
    let n = store.len();
    let labels = [1, 0];
    let groups = class_groups(&labels, 2)?;
    s.op("prototype-anchor modulation", &with_params(&store, vec![rand(&[2, 3, 4], 38), rand(&[3, 3, 4], 39)]), |g, v| {
        let (p, x) = split_leaves(v, n);
        let out = padm_forward(g, &p, &padm, x[0], &labels, &groups, x[1], true)?;
        Ok(padm_distance(g, &out, &groups, &SeqDisConfig::default())?)
    })
}

fn pipeline(s: &mut Suite) -> Result<()> {
    let data = SynthConfig {
        train_classes: 2,
        test_classes: 0,
        per_class: 2,
        frames: 3,
        channels: 8,
        templates: 2,
        noise: 0.5,
        ..SynthConfig::default()
    };
    let (manifest, store) = synth_dataset(&data)?;
    let cfg = ModelConfig {
        frames: 3,
        channels: 8,
        templates: 2,
        episode: EpisodeShape { way: 2, shot: 1, queries: 1 },
        encoder: EncoderConfig { depth: 1, heads: 2, ffn_mult: 4, init_std: 0.3 },
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(cfg.clone())?;
    let ep = EpisodeSampler::new(&manifest, &store, Split::Train)?.sample(cfg.episode, &mut episode_rng(0, 0))?;
    let inputs = with_params(&model.params, Vec::new());
    let report = check(&inputs, 1e-6, |g, vars| {
        let p = Binding::from_vars(vars.to_vec());
        let ei = EpisodeInputs::constants(g, &ep)?;
        Ok(episode_graph(g, &p, &model.layout, &cfg, &ei, Mode::Train)?.total)
    });
    s.record("episode pipeline", PIPELINE_TOLERANCE, report)
}

/// Runs every case; a case that cannot be evaluated at all is an error.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut s = Suite { cases: Vec::new() };
    tensor_ops(&mut s)?;
    model_ops(&mut s)?;
    pipeline(&mut s)?;
    Ok(s.cases)
}
