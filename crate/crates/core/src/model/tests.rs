use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck::{finite_diff_check, DEFAULT_STEP};
use crate::autograd::{Graph, Tensor, Var};
use crate::losses::Lambdas;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng(seed)))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Gradcheck of `f` with respect to the parameter `name`, all other
/// parameters held fixed.
fn param_check(store: &ParamStore, name: &str, tol: f64, f: impl Fn(&mut Graph, &params::Bound) -> crate::Result<Var>) {
    let x = store.get(name).unwrap().clone();
    let r = finite_diff_check(
        |g, v| {
            let mut s = store.clone();
            s.insert(name, g.value(v).clone());
            let mut p = s.bind(g, false)?;
            p = p.with(name, v);
            f(g, &p)
        },
        &x,
        DEFAULT_STEP,
        tol,
    )
    .unwrap();
    assert!(r.passed(), "{name}: {} at {}", r.max_rel_err, r.worst);
}

#[test]
fn encoded_length_arithmetic() {
    assert_eq!(ModelConfig::encoded_len(16), 4);
    assert_eq!(ModelConfig::encoded_len(17), 5);
    assert_eq!(ModelConfig::encoded_len(1), 1);
    assert_eq!(ModelConfig::encoded_len(0), 0);
    for t0 in 0..100usize {
        assert_eq!(ModelConfig::encoded_len(t0), (t0.div_ceil(2)).div_ceil(2));
        assert_eq!(ModelConfig::encoded_len(t0), t0.div_ceil(2).div_ceil(2));
    }
}

#[test]
fn encoder_shapes_and_determinism() {
    let cfg = ModelConfig::tiny();
    let store = init_params(&cfg, Mode::Cift, 1).unwrap();
    let run = |feats: Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let x = g.constant(feats).unwrap();
        let h = encode(&mut g, x, &p, &cfg).unwrap();
        g.value(h).clone()
    };
    let h = run(Tensor::zeros(&[16, cfg.feat_dim]));
    assert_eq!(h.shape(), &[4, cfg.d_model]);
    assert!(h.is_finite());
    assert_eq!(h, run(Tensor::zeros(&[16, cfg.feat_dim])));

    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::zeros(&[0, cfg.feat_dim])).unwrap();
    assert!(matches!(
        encode(&mut g, x, &p, &cfg),
        Err(crate::Error::DegenerateInput(_))
    ));
}

#[test]
fn encoder_gradients() {
    let cfg = ModelConfig::tiny();
    let store = init_params(&cfg, Mode::Cift, 2).unwrap();
    let x = Tensor::randn(&[16, cfg.feat_dim], 1.0, &mut rng(3));
    let r = finite_diff_check(
        |g, x| {
            let p = store.bind(g, false)?;
            let h = encode(g, x, &p, &cfg)?;
            weighted_sum(g, h, 4)
        },
        &x,
        DEFAULT_STEP,
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "{}", r.max_rel_err);
}

#[test]
fn predictor_rows_are_per_token() {
    let cfg = ModelConfig::tiny();
    let store = init_params(&cfg, Mode::Cift, 5).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let bos = predict(&mut g, &[], &p, &cfg).unwrap();
    assert_eq!(g.shape(bos), &[1, cfg.d_model]);

    // BOS row computed by hand: embed -> projection -> norm.
    let e = store.get("predictor.embed").unwrap().row(cfg.bos()).to_vec();
    let w = store.get("predictor.proj.weight").unwrap();
    let b = store.get("predictor.proj.bias").unwrap();
    let d = cfg.d_model;
    let proj: Vec<f64> = (0..d)
        .map(|j| b.data()[j] + (0..cfg.d_embed).map(|i| e[i] * w.data()[i * d + j]).sum::<f64>())
        .collect();
    let mean = proj.iter().sum::<f64>() / d as f64;
    let var = proj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    for (got, p) in g.value(bos).data().iter().zip(&proj) {
        let expect = (p - mean) / (var + layers::LN_EPS).sqrt();
        assert!((got - expect).abs() < 1e-12);
    }

    let z = predict(&mut g, &[3, 1, 3], &p, &cfg).unwrap();
    let v = g.value(z);
    assert_eq!(v.row(1), v.row(3));
    assert!(matches!(
        predict(&mut g, &[cfg.vocab], &p, &cfg),
        Err(crate::Error::Vocabulary { .. })
    ));
}

#[test]
fn predictor_embedding_gradient() {
    let cfg = ModelConfig::tiny();
    let store = init_params(&cfg, Mode::Cift, 6).unwrap();
    param_check(&store, "predictor.embed", 1e-4, |g, p| {
        let z = predict(g, &[2, 5, 2, 7], p, &cfg)?;
        weighted_sum(g, z, 7)
    });
}

fn ugbp_inputs(cfg: &ModelConfig, u: usize) -> (Tensor, Tensor) {
    let mut r = rng(8);
    (
        Tensor::randn(&[u, cfg.d_model], 1.0, &mut r),
        Tensor::randn(&[u, cfg.d_model], 1.0, &mut r),
    )
}

fn run_ugbp(store: &ParamStore, c: &Tensor, z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let c = g.constant(c.clone()).unwrap();
    let z = g.constant(z.clone()).unwrap();
    let y = ugbp_join(&mut g, c, z, &p).unwrap();
    g.value(y).clone()
}

#[test]
fn ugbp_zero_weights_and_shortcut_isolation() {
    let cfg = ModelConfig::tiny();
    let (c, z) = ugbp_inputs(&cfg, 3);
    let mut store = ParamStore::from_specs(&ugbp_specs(&cfg), 9);
    for s in ugbp_specs(&cfg) {
        store.insert(s.name.clone(), Tensor::zeros(&s.shape));
    }
    assert!(run_ugbp(&store, &c, &z).data().iter().all(|&v| v == 0.0));

    let mut store = ParamStore::from_specs(&ugbp_specs(&cfg), 9);
    let d = cfg.d_model;
    store.insert("joint.w_p", Tensor::zeros(&[cfg.rank(), d]));
    store.insert("joint.w_1", Tensor::identity(d));
    store.insert("joint.w_2", Tensor::zeros(&[d, d]));
    let y = run_ugbp(&store, &c, &z);
    for (a, b) in y.data().iter().zip(c.data()) {
        assert!((a - b.tanh()).abs() < 1e-15);
    }
}

#[test]
fn ugbp_gate_saturation() {
    let cfg = ModelConfig::tiny();
    let (c, z) = ugbp_inputs(&cfg, 3);
    let d = cfg.d_model;
    let base = ParamStore::from_specs(&ugbp_specs(&cfg), 10);

    // Bias -20 closes the gate: the bilinear term vanishes.
    let mut closed = base.clone();
    closed.insert("joint.gate_bias", Tensor::full(&[d], -20.0));
    closed.insert("joint.w_gc", Tensor::zeros(&[d, d]));
    closed.insert("joint.w_gz", Tensor::zeros(&[d, d]));
    let mut shortcut_only = closed.clone();
    shortcut_only.insert("joint.w_p", Tensor::zeros(&[cfg.rank(), d]));
    let y = run_ugbp(&closed, &c, &z);
    assert!(y.max_abs_diff(&run_ugbp(&shortcut_only, &c, &z)) < 1e-8);

    // Bias +20 opens it: h_gate equals z.
    let mut open = base.clone();
    open.insert("joint.gate_bias", Tensor::full(&[d], 20.0));
    open.insert("joint.w_gc", Tensor::zeros(&[d, d]));
    open.insert("joint.w_gz", Tensor::zeros(&[d, d]));
    let mut g = Graph::new();
    let p = open.bind(&mut g, false).unwrap();
    let cv = g.constant(c.clone()).unwrap();
    let zv = g.constant(z.clone()).unwrap();
    let y = ugbp_join(&mut g, cv, zv, &p).unwrap();
    // Same computation with the gate replaced by the identity.
    let a = g.linear(cv, p.get("joint.w_a").unwrap(), None).unwrap();
    let a = g.tanh(a).unwrap();
    let b = g.linear(zv, p.get("joint.w_b").unwrap(), None).unwrap();
    let b = g.tanh(b).unwrap();
    let ab = g.mul(a, b).unwrap();
    let hb = g.linear(ab, p.get("joint.w_p").unwrap(), None).unwrap();
    let s1 = g.linear(cv, p.get("joint.w_1").unwrap(), None).unwrap();
    let s2 = g.linear(zv, p.get("joint.w_2").unwrap(), None).unwrap();
    let s = g.add(hb, s1).unwrap();
    let s = g.add(s, s2).unwrap();
    let expect = g.tanh(s).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-8);
}

#[test]
fn ugbp_rejects_misaligned_inputs() {
    let cfg = ModelConfig::tiny();
    let store = ParamStore::from_specs(&ugbp_specs(&cfg), 11);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let c = g.constant(Tensor::zeros(&[3, cfg.d_model])).unwrap();
    let z = g.constant(Tensor::zeros(&[2, cfg.d_model])).unwrap();
    assert!(matches!(ugbp_join(&mut g, c, z, &p), Err(crate::Error::Alignment(_))));
}

#[test]
fn ugbp_gradients_for_every_weight_group() {
    let cfg = ModelConfig::tiny();
    let (c, z) = ugbp_inputs(&cfg, 3);
    let store = ParamStore::from_specs(&ugbp_specs(&cfg), 12);
    for s in ugbp_specs(&cfg) {
        param_check(&store, &s.name, 1e-4, |g, p| {
            let cv = g.constant(c.clone())?;
            let zv = g.constant(z.clone())?;
            let y = ugbp_join(g, cv, zv, p)?;
            weighted_sum(g, y, 13)
        });
    }
    let zc = z.clone();
    let r = finite_diff_check(
        |g, cv| {
            let p = store.bind(g, false)?;
            let zv = g.constant(zc.clone())?;
            let y = ugbp_join(g, cv, zv, &p)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        &c,
        DEFAULT_STEP,
        1e-4,
    )
    .unwrap();
    assert!(r.passed());
}

#[test]
fn baseline_joint_shapes_and_gradients() {
    let cfg = ModelConfig::tiny();
    let store = ParamStore::from_specs(&rnnt_joint_specs(&cfg), 14);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let h = g.constant(Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng(15))).unwrap();
    let z = g.constant(Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng(16))).unwrap();
    let y = rnnt_join_baseline(&mut g, h, z, &p).unwrap();
    assert_eq!(g.shape(y), &[1, 1, cfg.vocab + 1]);

    let (t, u) = (5, 3);
    let h = g.constant(Tensor::randn(&[t, cfg.d_model], 1.0, &mut rng(17))).unwrap();
    let z = g
        .constant(Tensor::randn(&[u + 1, cfg.d_model], 1.0, &mut rng(18)))
        .unwrap();
    let y = rnnt_join_baseline(&mut g, h, z, &p).unwrap();
    assert_eq!(g.value(y).numel(), t * (u + 1) * (cfg.vocab + 1));

    let ht = Tensor::randn(&[3, cfg.d_model], 1.0, &mut rng(19));
    let zt = Tensor::randn(&[3, cfg.d_model], 1.0, &mut rng(20));
    for s in rnnt_joint_specs(&cfg) {
        param_check(&store, &s.name, 1e-4, |g, p| {
            let h = g.constant(ht.clone())?;
            let z = g.constant(zt.clone())?;
            let y = rnnt_join_baseline(g, h, z, p)?;
            weighted_sum(g, y, 21)
        });
    }
}

#[test]
fn fusion_activation_ratio() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::from_specs(&rnnt_joint_specs(&cfg), 22);
    for (k, v) in ParamStore::from_specs(&ugbp_specs(&cfg), 22).iter() {
        store.insert(k.clone(), v.clone());
    }
    let (t, u, d) = (7, 3, cfg.d_model);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let h = g.constant(Tensor::zeros(&[t, d])).unwrap();
    let z = g.constant(Tensor::zeros(&[u + 1, d])).unwrap();
    let a = g.linear(h, p.get("rnnt_joint.w_enc").unwrap(), None).unwrap();
    let b = g.linear(z, p.get("rnnt_joint.w_pred").unwrap(), None).unwrap();
    let fused = g.outer_add(a, b).unwrap();
    let c = g.constant(Tensor::zeros(&[u, d])).unwrap();
    let zu = g.constant(Tensor::zeros(&[u, d])).unwrap();
    let joint = ugbp_join(&mut g, c, zu, &p).unwrap();
    let ratio = g.value(fused).numel() as f64 / g.value(joint).numel() as f64;
    assert_eq!(ratio, (t * (u + 1)) as f64 / u as f64);
}

#[test]
fn batch_loss_is_mean_of_utterance_losses() {
    let cfg = ModelConfig::tiny();
    let mut r = rng(23);
    let utts: Vec<(Tensor, Vec<usize>)> = [(16, vec![1, 2, 3]), (12, vec![4]), (20, vec![])]
        .into_iter()
        .map(|(t0, y)| (Tensor::randn(&[t0, cfg.feat_dim], 1.0, &mut r), y))
        .collect();
    for mode in [Mode::Cift, Mode::RnntBaseline] {
        let store = init_params(&cfg, mode, 24).unwrap();
        let items: Vec<(&Tensor, &[usize])> = utts.iter().map(|(x, y)| (x, y.as_slice())).collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let (mean, per) = batch_loss(&mut g, &p, &cfg, mode, &items, Lambdas::default()).unwrap();
        let mut sum = 0.0;
        for (x, y) in &items {
            let mut g1 = Graph::new();
            let p1 = store.bind(&mut g1, false).unwrap();
            let (l, _) = batch_loss(&mut g1, &p1, &cfg, mode, &[(x, y)], Lambdas::default()).unwrap();
            sum += g1.value(l).item();
        }
        assert!((g.value(mean).item() - sum / 3.0).abs() < 1e-9, "{mode}");
        if mode == Mode::Cift {
            assert_eq!(per.iter().map(|l| l.fire_count).collect::<Vec<_>>(), vec![3, 1, 0]);
        }
        for l in &per {
            let b = l.breakdown;
            let primary = b.rnnt.unwrap_or(b.joint_ce);
            let expect = primary + b.lambda1 * b.lm_ce + b.lambda2 * b.quantity + b.lambda3 * b.ctc;
            assert!((b.total - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cift_decode_edge_cases() {
    let cfg = ModelConfig::tiny();
    let mut store = init_params(&cfg, Mode::Cift, 25).unwrap();
    let feats = Tensor::randn(&[16, cfg.feat_dim], 1.0, &mut rng(26));
    store.insert("cif.fc.weight", Tensor::zeros(&[cfg.d_model, 1]));
    store.insert("cif.fc.bias", Tensor::vector(vec![-50.0]));
    let out = greedy_decode_cift(&store, &cfg, &feats, 100).unwrap();
    assert!(out.tokens.is_empty() && out.fire_count == 0);

    // Four frames at 0.3 each: one fire, residue 0.2 stays below the tail
    // threshold.
    store.insert("cif.fc.bias", Tensor::vector(vec![(0.3f64 / 0.7).ln()]));
    store.insert("classifier.weight", Tensor::zeros(&[cfg.d_model, cfg.vocab]));
    let mut bias = vec![0.0; cfg.vocab];
    bias[3] = 10.0;
    store.insert("classifier.bias", Tensor::vector(bias));
    let out = greedy_decode_cift(&store, &cfg, &feats, 100).unwrap();
    assert_eq!(out.tokens, vec![3]);
    assert_eq!(out.boundaries, vec![3]);
    assert!(out.top1()[0] > 0.99);
}

#[test]
fn rnnt_decode_edge_cases() {
    let cfg = ModelConfig::tiny();
    let d = cfg.d_model;
    let v1 = cfg.vocab + 1;
    let mut store = init_params(&cfg, Mode::RnntBaseline, 27).unwrap();
    let feats = Tensor::randn(&[16, cfg.feat_dim], 1.0, &mut rng(28));
    store.insert("rnnt_joint.out.weight", Tensor::zeros(&[d, v1]));
    let mut bias = vec![0.0; v1];
    bias[cfg.blank()] = 10.0;
    store.insert("rnnt_joint.out.bias", Tensor::vector(bias.clone()));
    assert!(greedy_decode_rnnt(&store, &cfg, &feats, 3).unwrap().tokens.is_empty());

    bias[cfg.blank()] = -10.0;
    bias[2] = 10.0;
    store.insert("rnnt_joint.out.bias", Tensor::vector(bias));
    let out = greedy_decode_rnnt(&store, &cfg, &feats, 3).unwrap();
    assert_eq!(out.tokens.len(), ModelConfig::encoded_len(16) * 3);

    // One frame: the BOS state emits token 1, the token-1 state emits blank.
    let mut store = init_params(&cfg, Mode::RnntBaseline, 29).unwrap();
    let de = cfg.d_embed;
    let mut embed = Tensor::zeros(&[cfg.vocab + 1, de]);
    embed.data_mut()[cfg.bos() * de] = 1.0;
    embed.data_mut()[cfg.bos() * de + 1] = -1.0;
    embed.data_mut()[de + 2] = 1.0;
    embed.data_mut()[de + 3] = -1.0;
    store.insert("predictor.embed", embed);
    let mut proj = Tensor::zeros(&[de, d]);
    for i in 0..de {
        proj.data_mut()[i * d + i] = 1.0;
    }
    store.insert("predictor.proj.weight", proj);
    store.insert("rnnt_joint.w_enc", Tensor::zeros(&[d, d]));
    store.insert("rnnt_joint.w_pred", Tensor::identity(d));
    let state = |tok: usize| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let z = net::predictor_rows(&mut g, &[tok], &p).unwrap();
        g.value(z).data().iter().map(|v| v.tanh()).collect::<Vec<_>>()
    };
    let (s_bos, s_1) = (state(cfg.bos()), state(1));
    let mut w = Tensor::zeros(&[d, v1]);
    for j in 0..d {
        w.data_mut()[j * v1 + 1] = s_bos[j];
        w.data_mut()[j * v1 + cfg.blank()] = s_1[j];
    }
    store.insert("rnnt_joint.out.weight", w);
    store.insert("rnnt_joint.out.bias", Tensor::zeros(&[v1]));
    let out = greedy_decode_rnnt(&store, &cfg, &Tensor::zeros(&[2, cfg.feat_dim]), 3).unwrap();
    assert_eq!(out.tokens, vec![1]);
    assert_eq!(out.boundaries, vec![0]);
}
