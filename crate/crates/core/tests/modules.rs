use fsar_core::config::EncoderConfig;
use fsar_core::distances::{seq_dis, softmin, SeqDisConfig};
use fsar_core::fusion::{sf_forward, FusionStrategy, GateSource, SfOptions, SfParams};
use fsar_core::grouping::class_groups;
use fsar_core::hsmr::{hsmr_forward, mfe, ConsistencyTarget, HsmrParams, MfeParams, Phi};
use fsar_core::padm::{padm_distance, padm_forward, PadmOutput, PadmParams};
use fsar_core::spm::{prompt_generate, spm_forward, spm_prototypes, ConstraintMode, Mode, SpmInputs, SpmParams};
use fsar_tensor::gradcheck;
use fsar_tensor::nn::Activation;
use fsar_tensor::{Binding, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ENC: EncoderConfig = EncoderConfig { depth: 1, heads: 2, ffn_mult: 4, init_std: 0.3 };

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params_as_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// ---- fusion ----

#[test]
fn fusion_splits_one_prompt_and_eight_frames() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let sf = SfParams::new(&mut store, "sf", 4, &ENC, &mut r).unwrap();
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let pr = g.constant(&Tensor::randn(vec![1, 4], 1.0, &mut r));
    let vi = g.constant(&Tensor::randn(vec![8, 4], 1.0, &mut r));
    let out = sf_forward(&mut g, &p, &sf, pr, vi, None, SfOptions::default()).unwrap();
    assert_eq!(g.shape(out.prompt), &[1, 4]);
    assert_eq!(g.shape(out.visual), &[8, 4]);
}

#[test]
fn gate_parameters_match_finite_differences() {
    let mut r = rng(2);
    let mut store = ParamStore::<f64>::new();
    let sf = SfParams::new(&mut store, "sf", 4, &ENC, &mut r).unwrap();
    let pr = Tensor::randn(vec![2, 1, 4], 1.0, &mut r);
    let vi = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
    for source in [GateSource::Encoded, GateSource::Input] {
        let opts = SfOptions { strategy: FusionStrategy::ConcatSumGate, gate_source: source };
        let report = gradcheck::check(&params_as_inputs(&store), 1e-5, |g, vars| {
            let p = Binding::from_vars(vars.to_vec());
            let a = g.constant(&pr);
            let b = g.constant(&vi);
            let out = sf_forward(g, &p, &sf, a, b, None, opts)?;
            let both = g.concat(&[out.prompt, out.visual], 1)?;
            Ok(both)
        })
        .unwrap();
        assert!(report.passes(1e-5), "{source:?}: {}", report.max_error());
    }
}

#[test]
fn fusion_is_equivariant_to_frame_order_without_positions() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let sf = SfParams::new(&mut store, "sf", 4, &ENC, &mut r).unwrap();
    let pr = Tensor::randn(vec![1, 1, 4], 1.0, &mut r);
    let vi = Tensor::randn(vec![1, 5, 4], 1.0, &mut r);
    let perm = [3usize, 0, 4, 1, 2];
    for strategy in [FusionStrategy::Concat, FusionStrategy::ConcatSum, FusionStrategy::ConcatSumGate] {
        let opts = SfOptions { strategy, gate_source: GateSource::Encoded };
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let a = g.constant(&pr);
        let b = g.constant(&vi);
        let bp = g.index_select(b, 1, &perm).unwrap();
        let o1 = sf_forward(&mut g, &p, &sf, a, b, None, opts).unwrap();
        let o2 = sf_forward(&mut g, &p, &sf, a, bp, None, opts).unwrap();
        let o1p = g.index_select(o1.visual, 1, &perm).unwrap();
        assert!(close(g.data(o1p), g.data(o2.visual), 1e-12), "{strategy:?}");
        assert!(close(g.data(o1.prompt), g.data(o2.prompt), 1e-12), "{strategy:?}");
    }
}

#[test]
fn positions_are_added_to_the_frames_only() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let sf = SfParams::new(&mut store, "sf", 4, &ENC, &mut r).unwrap();
    sf.encoder.zero_residual(&mut store);
    let pos = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let pr = Tensor::randn(vec![1, 4], 1.0, &mut r);
    let vi = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let (a, b, ps) = (g.constant(&pr), g.constant(&vi), g.constant(&pos));
    let opts = SfOptions { strategy: FusionStrategy::Concat, gate_source: GateSource::Encoded };
    let out = sf_forward(&mut g, &p, &sf, a, b, Some(ps), opts).unwrap();
    let want: Vec<f64> = vi.data().iter().zip(pos.data()).map(|(x, y)| x + y).collect();
    assert_eq!(g.data(out.visual), want.as_slice());
    assert_eq!(g.data(out.prompt), pr.data());
}

// ---- motion ----

fn loop_mfe(frames: &[f64], t: usize, c: usize, phi: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut m = vec![0.0; c];
    for s in 0..t - 1 {
        let cur = &frames[s * c..(s + 1) * c];
        let next = &frames[(s + 1) * c..(s + 2) * c];
        let (pn, pc) = (phi(next), phi(cur));
        for k in 0..c {
            m[k] += (pn[k] - cur[k]) + (pc[k] - next[k]);
        }
    }
    m
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect()
}

#[test]
fn motion_token_matches_per_step_loop() {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let mfe_p = MfeParams::new(&mut store, "m", 8, 4, 0.5, &mut r).unwrap();
    let Phi::Bottleneck { down, up, .. } = &mfe_p.phi else { unreachable!() };
    let (w1, b1) = (store.get(down.weight).data().to_vec(), store.get(down.bias.unwrap()).data().to_vec());
    let (w2, b2) = (store.get(up.weight).data().to_vec(), store.get(up.bias.unwrap()).data().to_vec());
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let phi = |x: &[f64]| {
        let h: Vec<f64> = affine(x, &w1, &b1, 2).into_iter().map(gelu).collect();
        affine(&h, &w2, &b2, 8)
    };
    let frames = Tensor::randn(vec![6, 8], 1.0, &mut r);
    let want = loop_mfe(frames.data(), 6, 8, phi);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let f = g.constant(&frames);
    let m = mfe(&mut g, &p, &mfe_p, f).unwrap();
    assert_eq!(g.shape(m), &[1, 8]);
    assert!(close(g.data(m), &want, 1e-12));
}

#[test]
fn linear_motion_extractor_superposes() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let mut mfe_p = MfeParams::new(&mut store, "m", 8, 4, 0.5, &mut r).unwrap();
    if let Phi::Bottleneck { down, up, activation } = &mut mfe_p.phi {
        *activation = Activation::Identity;
        for b in [down.bias.unwrap(), up.bias.unwrap()] {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = Tensor::randn(vec![2, 5, 8], 1.0, &mut r);
    let y = Tensor::randn(vec![2, 5, 8], 1.0, &mut r);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let (xv, yv) = (g.constant(&x), g.constant(&y));
    let s = g.add(xv, yv).unwrap();
    let (mx, my, ms) = (
        mfe(&mut g, &p, &mfe_p, xv).unwrap(),
        mfe(&mut g, &p, &mfe_p, yv).unwrap(),
        mfe(&mut g, &p, &mfe_p, s).unwrap(),
    );
    let sum: Vec<f64> = g.data(mx).iter().zip(g.data(my)).map(|(a, b)| a + b).collect();
    assert!(close(g.data(ms), &sum, 1e-12));
}

#[test]
fn identity_cascade_has_zero_motion_and_consistency() {
    let mut store = ParamStore::<f64>::new();
    let sf = SfParams::new(&mut store, "sf", 4, &ENC, &mut rng(7)).unwrap();
    sf.encoder.zero_residual(&mut store);
    let hsmr = HsmrParams {
        shallow: MfeParams::scaled_identity(&mut store, "s", 4, 1.0),
        deep: MfeParams::scaled_identity(&mut store, "d", 4, 1.0),
        sf,
    };
    let row = [0.3, -1.2, 2.0, 0.7];
    let frames = Tensor::new(vec![2, 8, 4], row.iter().copied().cycle().take(64).collect()).unwrap();
    for strategy in [FusionStrategy::Concat, FusionStrategy::ConcatSum] {
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let f = g.constant(&frames);
        let opts = SfOptions { strategy, gate_source: GateSource::Encoded };
        let out = hsmr_forward(&mut g, &p, &hsmr, f, None, opts, ConsistencyTarget::PostFusion).unwrap();
        assert_eq!(g.shape(out.shallow), &[2, 1, 4]);
        assert_eq!(g.shape(out.deep), &[2, 1, 4]);
        assert_eq!(g.shape(out.refined), &[2, 8, 4]);
        assert!(g.data(out.shallow).iter().chain(g.data(out.deep)).all(|&v| v == 0.0));
        assert!(g.data(out.consistency).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn motion_consistency_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let hsmr = HsmrParams::new(&mut store, "h", 4, 2, &ENC, &mut r).unwrap();
    let frames = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
    let report = gradcheck::check(&[frames], 1e-5, |g, v| {
        let p = g.bind(&store, false);
        let out = hsmr_forward(g, &p, &hsmr, v[0], None, SfOptions::default(), ConsistencyTarget::PostFusion)?;
        Ok(g.sum_all(out.consistency))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{}", report.max_error());
}

#[test]
fn motion_token_norms_separate_classes_in_the_motion_only_regime() {
    use fsar_core::dataset::{synth_dataset, SynthConfig};
    let cfg = SynthConfig {
        train_classes: 2,
        test_classes: 0,
        per_class: 30,
        channels: 64,
        templates: 1,
        appearance_sep: 0.0,
        motion_sep: 1.0,
        noise: 0.05,
        seed: 3,
        ..SynthConfig::default()
    };
    let (_, store) = synth_dataset(&cfg).unwrap();
    let mut ps = ParamStore::<f64>::new();
    let mfe_p = MfeParams::new(&mut ps, "m", 64, 4, 0.02, &mut rng(0)).unwrap();
    let mut norms = [Vec::new(), Vec::new()];
    for v in store.videos() {
        let mut g = Graph::new();
        let p = g.bind(&ps, false);
        let f = g.constant_from(vec![8, 64], v.frames.iter().map(|&x| f64::from(x)).collect()).unwrap();
        let m = mfe(&mut g, &p, &mfe_p, f).unwrap();
        norms[v.class_id as usize].push(g.data(m).iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        (mean, sd)
    };
    let ((ma, sa), (mb, sb)) = (stats(&norms[0]), stats(&norms[1]));
    assert!((ma - mb).abs() > 5.0 * sa.max(sb), "means {ma} {mb}, deviations {sa} {sb}");
}

// ---- prompt modulation ----

fn spm_setup(seed: u64, c: usize) -> (ParamStore<f64>, SpmParams, ChaCha8Rng) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let spm = SpmParams::new(&mut store, "spm", c, 2, &ENC, &mut r).unwrap();
    (store, spm, r)
}

#[test]
fn prompt_generator_matches_loop_oracle() {
    let (store, spm, mut r) = spm_setup(9, 4);
    let prompts = Tensor::randn(vec![3, 1, 4], 1.0, &mut r);
    let vis = Tensor::randn(vec![2, 5, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let (pv, vv) = (g.constant(&prompts), g.constant(&vis));
    let out = prompt_generate(&mut g, &p, &spm.pg, pv, vv).unwrap();
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let layer = |i: usize, x: &[f64]| {
        let l = &spm.pg.layers[i];
        affine(x, store.get(l.weight).data(), store.get(l.bias.unwrap()).data(), 4)
    };
    for b in 0..2 {
        let mut h = vec![0.0; 4];
        for k in 0..4 {
            let gk = (0..3).map(|o| prompts.data()[o * 4 + k]).sum::<f64>() / 3.0;
            let vk = (0..5).map(|t| vis.data()[b * 20 + t * 4 + k]).sum::<f64>() / 5.0;
            h[k] = gk * vk;
        }
        let h = layer(0, &h);
        let h: Vec<f64> = h.into_iter().map(gelu).collect();
        let h = layer(1, &h);
        assert!(close(&g.data(out)[b * 4..b * 4 + 4], &h, 1e-12));
    }
}

struct SpmCase {
    support: Tensor<f64>,
    query: Tensor<f64>,
    support_prompts: Tensor<f64>,
    query_prompts: Tensor<f64>,
}

fn spm_case(r: &mut ChaCha8Rng, n: usize, k: usize, m: usize, t: usize, c: usize) -> SpmCase {
    SpmCase {
        support: Tensor::randn(vec![n * k, t, c], 1.0, r),
        query: Tensor::randn(vec![n * m, t, c], 1.0, r),
        support_prompts: Tensor::randn(vec![n * k, 1, c], 1.0, r),
        query_prompts: Tensor::randn(vec![n * m, 1, c], 1.0, r),
    }
}

fn inputs(g: &mut Graph<f64>, case: &SpmCase, with_query: bool) -> SpmInputs {
    SpmInputs {
        support: g.constant(&case.support),
        query: g.constant(&case.query),
        support_prompts: g.constant(&case.support_prompts),
        query_prompts: with_query.then(|| g.constant(&case.query_prompts)),
        learned_override: None,
    }
}

#[test]
fn spm_shapes_for_the_standard_protocol() {
    let (store, spm, mut r) = spm_setup(10, 8);
    let case = spm_case(&mut r, 5, 1, 4, 8, 8);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let inp = inputs(&mut g, &case, true);
    let out = spm_forward(&mut g, &p, &spm, &inp, Mode::Train, ConstraintMode::Both, SfOptions::default()).unwrap();
    assert_eq!(g.shape(out.support), &[5, 8, 8]);
    assert_eq!(g.shape(out.query), &[20, 8, 8]);
    assert_eq!(g.shape(out.real_support_prompts), &[5, 1, 8]);
    assert_eq!(g.shape(out.learned_query_prompts), &[20, 1, 8]);
    assert_eq!(g.shape(out.real_query_prompts.unwrap()), &[20, 1, 8]);
    assert_eq!(g.shape(out.learned_support_prompts.unwrap()), &[5, 1, 8]);
    assert_eq!(g.shape(out.support_consistency.unwrap()), &[5]);
    assert_eq!(g.shape(out.query_consistency.unwrap()), &[20]);
    assert!(g.item(out.consistency) > 0.0);
}

#[test]
fn copying_real_prompts_into_the_learned_path_zeroes_consistency() {
    let (store, spm, mut r) = spm_setup(11, 8);
    let case = spm_case(&mut r, 3, 2, 2, 4, 8);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let mut inp = inputs(&mut g, &case, true);
    inp.learned_override = Some((inp.support_prompts, inp.query_prompts.unwrap()));
    let out = spm_forward(&mut g, &p, &spm, &inp, Mode::Train, ConstraintMode::Both, SfOptions::default()).unwrap();
    assert!(g.item(out.consistency).abs() <= 1e-6);
}

#[test]
fn disabled_constraint_gives_zero_consistency() {
    let (store, spm, mut r) = spm_setup(12, 8);
    let case = spm_case(&mut r, 3, 1, 2, 4, 8);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let inp = inputs(&mut g, &case, false);
    let out = spm_forward(&mut g, &p, &spm, &inp, Mode::Train, ConstraintMode::None, SfOptions::default()).unwrap();
    assert_eq!(g.item(out.consistency), 0.0);
    assert!(out.support_consistency.is_none() && out.query_consistency.is_none());
}

#[test]
fn real_query_prompts_at_test_time_are_rejected() {
    let (store, spm, mut r) = spm_setup(13, 8);
    let case = spm_case(&mut r, 2, 1, 1, 3, 8);
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let inp = inputs(&mut g, &case, true);
    let err = spm_forward(&mut g, &p, &spm, &inp, Mode::Test, ConstraintMode::Both, SfOptions::default()).unwrap_err();
    assert!(matches!(err, fsar_core::Error::Contract(_)));
}

#[test]
fn query_labels_only_reach_the_query_consistency() {
    let (store, spm, mut r) = spm_setup(14, 8);
    let case = spm_case(&mut r, 2, 1, 2, 3, 8);
    let mut other = spm_case(&mut r, 2, 1, 2, 3, 8);
    other.support = case.support.clone();
    other.query = case.query.clone();
    other.support_prompts = case.support_prompts.clone();
    let run = |case: &SpmCase| {
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let inp = inputs(&mut g, case, true);
        let out = spm_forward(&mut g, &p, &spm, &inp, Mode::Train, ConstraintMode::Both, SfOptions::default()).unwrap();
        (
            g.data(out.support).to_vec(),
            g.data(out.query).to_vec(),
            g.data(out.support_consistency.unwrap()).to_vec(),
            g.data(out.query_consistency.unwrap()).to_vec(),
        )
    };
    let (a, b) = (run(&case), run(&other));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_ne!(a.3, b.3);
}

#[test]
fn prototypes_average_the_shots() {
    let mut r = rng(15);
    let x = Tensor::<f64>::randn(vec![6, 2, 3], 1.0, &mut r);
    let labels = [1, 0, 1, 0, 0, 1];
    let groups = class_groups(&labels, 2).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let protos = spm_prototypes(&mut g, xv, &groups).unwrap();
    for n in 0..2 {
        let members: Vec<usize> = (0..6).filter(|&i| labels[i] == n).collect();
        let want: Vec<f64> = (0..6).map(|e| members.iter().map(|&i| x.data()[i * 6 + e]).sum::<f64>() / 3.0).collect();
        assert!(close(&g.data(protos)[n * 6..n * 6 + 6], &want, 1e-12));
    }
    let shuffled = g.index_select(xv, 0, &[3, 5, 2, 1, 4, 0]).unwrap();
    let labels2 = [0, 1, 1, 0, 0, 1];
    let again = spm_prototypes(&mut g, shuffled, &class_groups(&labels2, 2).unwrap()).unwrap();
    assert!(close(g.data(protos), g.data(again), 1e-6));

    let single = Tensor::<f64>::randn(vec![2, 2, 3], 1.0, &mut r);
    let sv = g.constant(&single);
    let p1 = spm_prototypes(&mut g, sv, &class_groups(&[1, 0], 2).unwrap()).unwrap();
    assert_eq!(&g.data(p1)[..6], &single.data()[6..]);
    assert!(class_groups(&[0, 0, 1], 2).is_err());
}

// ---- prototype-anchor modulation ----

#[test]
fn identity_encoders_expose_transductive_means() {
    let mut r = rng(16);
    let mut store = ParamStore::<f64>::new();
    let padm = PadmParams::new(&mut store, "padm", 4, &ENC, &mut r).unwrap();
    padm.zero_residual(&mut store);
    let (n, m, t, c) = (5, 4, 8, 4);
    let support = Tensor::<f64>::randn(vec![n, t, c], 1.0, &mut r);
    let query = Tensor::<f64>::randn(vec![n * m, t, c], 1.0, &mut r);
    let labels = [2, 0, 4, 1, 3];
    let groups = class_groups(&labels, n).unwrap();
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let (sv, qv) = (g.constant(&support), g.constant(&query));
    let out = padm_forward(&mut g, &p, &padm, sv, &labels, &groups, qv, true).unwrap();
    assert_eq!(g.data(out.support), support.data());
    assert_eq!(g.data(out.query), query.data());
    assert_eq!(g.shape(out.query_anchor), &[1, t, c]);
    assert_eq!(g.shape(out.prototypes), &[n, t, c]);
    let qmean: Vec<f64> = (0..t * c).map(|e| (0..n * m).map(|j| query.data()[j * t * c + e]).sum::<f64>()).collect();
    for (i, &l) in labels.iter().enumerate() {
        let want: Vec<f64> = (0..t * c).map(|e| (support.data()[i * t * c + e] + qmean[e]) / 21.0).collect();
        assert!(close(&g.data(out.initial_prototypes)[l * t * c..(l + 1) * t * c], &want, 1e-12));
    }
    assert_eq!(g.data(out.prototypes), g.data(out.initial_prototypes));
    let anchor: Vec<f64> =
        (0..t * c).map(|e| (0..n).map(|k| g.data(out.initial_prototypes)[k * t * c + e]).sum::<f64>() / 5.0).collect();
    assert!(close(g.data(out.anchor), &anchor, 1e-12));
    assert!(close(g.data(out.query_anchor), &anchor, 1e-12));
}

#[test]
fn query_order_does_not_matter() {
    let mut r = rng(17);
    let mut store = ParamStore::<f64>::new();
    let padm = PadmParams::new(&mut store, "padm", 4, &ENC, &mut r).unwrap();
    let support = Tensor::<f64>::randn(vec![4, 3, 4], 1.0, &mut r);
    let query = Tensor::<f64>::randn(vec![6, 3, 4], 1.0, &mut r);
    let labels = [0, 1, 0, 1];
    let groups = class_groups(&labels, 2).unwrap();
    let perm = [4, 2, 0, 5, 1, 3];
    let mut g = Graph::new();
    let p = g.bind(&store, false);
    let (sv, qv) = (g.constant(&support), g.constant(&query));
    let qp = g.index_select(qv, 0, &perm).unwrap();
    let a = padm_forward(&mut g, &p, &padm, sv, &labels, &groups, qv, true).unwrap();
    let b = padm_forward(&mut g, &p, &padm, sv, &labels, &groups, qp, true).unwrap();
    for (x, y) in [(a.support, b.support), (a.prototypes, b.prototypes), (a.query_anchor, b.query_anchor), (a.anchor, b.anchor)] {
        assert!(close(g.data(x), g.data(y), 1e-6));
    }
    let aq = g.index_select(a.query, 0, &perm).unwrap();
    assert!(close(g.data(aq), g.data(b.query), 1e-6));
    let cfg = SeqDisConfig::default();
    let da = padm_distance(&mut g, &a, &groups, &cfg).unwrap();
    let db = padm_distance(&mut g, &b, &groups, &cfg).unwrap();
    let dap = g.index_select(da, 0, &perm).unwrap();
    assert!(close(g.data(dap), g.data(db), 1e-6));
}

fn const_output(g: &mut Graph<f64>, support: Tensor<f64>, query: Tensor<f64>, protos: Tensor<f64>, anchor: Tensor<f64>) -> PadmOutput {
    let (s, q, p, a) = (g.constant(&support), g.constant(&query), g.constant(&protos), g.constant(&anchor));
    PadmOutput { support: s, query: q, prototypes: p, query_anchor: a, anchor: a, initial_prototypes: p }
}

#[test]
fn equal_features_give_uniform_probabilities() {
    let row = Tensor::<f64>::randn(vec![1, 3, 4], 1.0, &mut rng(18));
    let tile = |k: usize| Tensor::new(vec![k, 3, 4], row.data().iter().copied().cycle().take(k * 12).collect()).unwrap();
    let groups = class_groups(&[0, 1, 2], 3).unwrap();
    let mut g = Graph::new();
    let out = const_output(&mut g, tile(3), tile(4), tile(3), tile(1));
    let cfg = SeqDisConfig::default();
    let d = padm_distance(&mut g, &out, &groups, &cfg).unwrap();
    let x = g.constant(&row.reshape(vec![3, 4]).unwrap());
    let self_d = seq_dis(&mut g, x, x, &cfg).unwrap();
    let want = 2.0 * g.item(self_d);
    assert!(g.data(d).iter().all(|&v| (v - want).abs() < 1e-12));
    let probs = fsar_core::distances::class_probabilities(&g.data(d)[..3]);
    assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn anchor_term_is_shared_by_all_queries() {
    let mut r = rng(19);
    let groups = class_groups(&[0, 1], 2).unwrap();
    let mut g = Graph::new();
    let out = const_output(
        &mut g,
        Tensor::randn(vec![2, 3, 4], 1.0, &mut r),
        Tensor::randn(vec![5, 3, 4], 1.0, &mut r),
        Tensor::randn(vec![2, 3, 4], 1.0, &mut r),
        Tensor::randn(vec![1, 3, 4], 1.0, &mut r),
    );
    let cfg = SeqDisConfig::default();
    let full = padm_distance(&mut g, &out, &groups, &cfg).unwrap();
    let sample = fsar_core::distances::pairwise_seq_dis(&mut g, out.query, out.support, &cfg).unwrap();
    let bias = g.sub(full, sample).unwrap();
    let b = g.data(bias).to_vec();
    for j in 1..5 {
        assert!(close(&b[j * 2..j * 2 + 2], &b[..2], 1e-12));
    }
}

/// Soft alignment of a 2x2 cost matrix worked out cell by cell.
fn hand_dp(d: [[f64; 2]; 2], gamma: f64) -> f64 {
    let sm = |xs: &[f64]| softmin(xs, gamma);
    let r0 = [0.0, d[0][0], d[0][0] + d[0][1], d[0][0] + d[0][1]];
    let r10 = 0.0;
    let r11 = d[1][0] + sm(&[r10, r0[0]]);
    let r12 = d[1][1] + sm(&[r11, r0[1]]);
    sm(&[r12, r0[2], r0[3]])
}

fn hand_seq_dis(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    let cos = |x: [f64; 2], y: [f64; 2]| {
        let n = |v: [f64; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();
        (x[0] * y[0] + x[1] * y[1]) / (n(x) * n(y))
    };
    let mut d = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            d[i][j] = 1.0 - cos(a[i], b[j]);
        }
    }
    let dt = [[d[0][0], d[1][0]], [d[0][1], d[1][1]]];
    0.5 * (hand_dp(d, 0.1) + hand_dp(dt, 0.1))
}

#[test]
fn two_way_orthogonal_episode_matches_hand_values() {
    let e0 = [1.0, 0.0];
    let e1 = [0.0, 1.0];
    let s = [[e0, e1], [e1, e0]];
    let q = [[e0, e1], [e1, e1]];
    let protos = [[e0, e0], [e1, e1]];
    let anchor = [e0, e1];
    let flat = |xs: &[[[f64; 2]; 2]]| xs.iter().flat_map(|m| m.iter().flat_map(|r| r.iter().copied())).collect::<Vec<_>>();
    let groups = class_groups(&[0, 1], 2).unwrap();
    let mut g = Graph::new();
    let out = const_output(
        &mut g,
        Tensor::new(vec![2, 2, 2], flat(&s)).unwrap(),
        Tensor::new(vec![2, 2, 2], flat(&q)).unwrap(),
        Tensor::new(vec![2, 2, 2], flat(&protos)).unwrap(),
        Tensor::new(vec![1, 2, 2], flat(&[anchor])).unwrap(),
    );
    let d = padm_distance(&mut g, &out, &groups, &SeqDisConfig::default()).unwrap();
    for j in 0..2 {
        for n in 0..2 {
            let want = hand_seq_dis(q[j], s[n]) + hand_seq_dis(anchor, protos[n]);
            assert!((g.data(d)[j * 2 + n] - want).abs() < 1e-12, "({j},{n})");
        }
    }
}

#[test]
fn both_encoder_paths_match_finite_differences() {
    let mut r = rng(20);
    let mut store = ParamStore::<f64>::new();
    let padm = PadmParams::new(&mut store, "padm", 4, &ENC, &mut r).unwrap();
    let support = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut r);
    let query = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut r);
    let labels = [1, 0];
    let groups = class_groups(&labels, 2).unwrap();
    let mut inputs = params_as_inputs(&store);
    inputs.push(support);
    inputs.push(query);
    let np = store.len();
    let report = gradcheck::check(&inputs, 1e-5, |g, v| {
        let p = Binding::from_vars(v[..np].to_vec());
        let out = padm_forward(g, &p, &padm, v[np], &labels, &groups, v[np + 1], true)?;
        Ok(padm_distance(g, &out, &groups, &SeqDisConfig::default())?)
    })
    .unwrap();
    assert!(report.passes(1e-5), "{}", report.max_error());
}
