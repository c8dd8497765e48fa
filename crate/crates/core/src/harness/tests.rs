use super::*;
use crate::autograd::OpKind;
use crate::data::{generate, GenConfig};
use crate::model::{self, Mode, ModelConfig, ParamStore};

#[test]
fn gradcheck_passes_in_both_modes() {
    for mode in [Mode::Cift, Mode::RnntBaseline] {
        let r = gradcheck::run(mode, &gradcheck::GradcheckSetup::default(), None).unwrap();
        let worst = r
            .groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        assert!(r.passed, "{mode}: {} ({:.3e})", worst.name, worst.max_rel_err);
        assert_eq!(r.groups.len(), model::param_specs(&ModelConfig::tiny(), mode).len());
    }
}

#[test]
fn gradcheck_catches_a_corrupted_backward_rule() {
    for (mode, kind) in [(Mode::Cift, OpKind::Linear), (Mode::RnntBaseline, OpKind::Tanh)] {
        let r = gradcheck::run(mode, &gradcheck::GradcheckSetup::default(), Some(kind)).unwrap();
        assert!(!r.passed, "{mode} with {kind:?}");
    }
}

fn tiny_run(mode: Mode, steps: usize) -> (RunConfig, Vec<crate::data::Utterance>) {
    let data = generate(&GenConfig {
        vocab: 8,
        feat_dim: 4,
        count: 6,
        max_tokens: 4,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = RunConfig {
        mode,
        model: ModelConfig::tiny(),
        seed: 11,
        steps,
        batch_size: 2,
        ..RunConfig::default()
    };
    (cfg, data)
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (cfg, _) = tiny_run(Mode::Cift, 0);
    let params = model::init_params(&cfg.model, cfg.mode, 3).unwrap();
    let bytes = checkpoint::encode(&params, &cfg);
    let (p2, c2) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(p2, params);
    assert_eq!(c2, cfg);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad), Err(crate::Error::Checkpoint(_))));
    assert!(matches!(
        checkpoint::decode(&bytes[..bytes.len() - 3]),
        Err(crate::Error::Checkpoint(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(checkpoint::decode(&long), Err(crate::Error::Checkpoint(_))));
    assert!(matches!(checkpoint::decode(b""), Err(crate::Error::Checkpoint(_))));
}

#[test]
fn zero_steps_writes_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_run(Mode::RnntBaseline, 0);
    cfg.checkpoint = Some(dir.path().join("c.bin"));
    let out = train(&cfg, &data, None).unwrap();
    let init = model::init_params(&cfg.model, cfg.mode, cfg.seed).unwrap();
    assert_eq!(out.params, init);
    assert!(out.history.is_empty());
    let (loaded, _) = checkpoint::load(dir.path().join("c.bin")).unwrap();
    assert_eq!(loaded, init);
}

#[test]
fn training_is_byte_reproducible() {
    // same output paths both times: the checkpoint embeds the config
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::Cift, Mode::RnntBaseline] {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let (mut cfg, data) = tiny_run(mode, 4);
            cfg.checkpoint = Some(dir.path().join("c.bin"));
            cfg.metrics = Some(dir.path().join("m.jsonl"));
            train(&cfg, &data, None).unwrap();
            let ckpt = std::fs::read(dir.path().join("c.bin")).unwrap();
            let log = std::fs::read(dir.path().join("m.jsonl")).unwrap();
            assert_eq!(log.iter().filter(|&&b| b == b'\n').count(), 4);
            outputs.push((ckpt, log));
        }
        assert!(outputs[0] == outputs[1], "{mode} runs differ");
    }
}

#[test]
fn non_finite_loss_aborts_with_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_run(Mode::Cift, 3);
    cfg.checkpoint = Some(dir.path().join("c.bin"));
    let mut init = model::init_params(&cfg.model, cfg.mode, cfg.seed).unwrap();
    init.get_mut("classifier.weight").unwrap().data_mut()[0] = f64::NAN;
    let err = train(&cfg, &data, Some(init)).unwrap_err();
    assert!(matches!(err, crate::Error::Numerical(_)));
    assert_eq!(err.exit_code(), 4);
    assert!(dir.path().join("c.bin").exists());
}

#[test]
fn edit_distance_counts() {
    let e = edit_distance(&[1, 2, 3], &[1, 3]);
    assert_eq!((e.substitutions, e.insertions, e.deletions), (0, 0, 1));
    assert_eq!(edit_distance(&[], &[4, 4]).insertions, 2);
    assert_eq!(edit_distance(&[1, 2], &[2, 1]).total(), 2);
    assert_eq!(edit_distance(&[5, 6, 7], &[5, 6, 7]).total(), 0);
}

#[test]
fn cer_of_a_single_deletion() {
    let data = vec![crate::data::Utterance {
        id: "a".into(),
        features: crate::Tensor::zeros(&[4, 2]),
        targets: vec![1, 2, 3],
        spans: None,
    }];
    let hyp = model::DecodeResult {
        tokens: vec![1, 3],
        ..Default::default()
    };
    let r = eval::score(&[hyp], &data, Mode::RnntBaseline).unwrap();
    assert!((r.cer - 1.0 / 3.0).abs() < 1e-15);
    assert!(r.fire.is_none());
}

#[test]
fn analytic_fusion_ratios() {
    let a = bench::analytic_counts(1, 100, 20, 50, 64);
    assert!((a.logits_ratio - 107.1).abs() < 1e-9, "{}", a.logits_ratio);
    let f = bench::analytic_counts(1, 1, 1, 50, 64);
    assert!((f.logits_ratio - 2.04).abs() < 1e-9);
    assert_eq!(a.rnnt_fusion, 100 * 21 * (51 + 64));
    assert_eq!(a.cift_fusion, 20 * (50 + 64));
}

#[test]
fn learning_rate_schedule() {
    let o = OptimConfig {
        lr: 1e-3,
        warmup_steps: 10,
        ..OptimConfig::default()
    };
    assert!((optim::learning_rate(&o, 0) - 1e-4).abs() < 1e-18);
    assert!((optim::learning_rate(&o, 9) - 1e-3).abs() < 1e-18);
    assert!((optim::learning_rate(&o, 39) - 5e-4).abs() < 1e-15);
    let flat = OptimConfig { warmup_steps: 0, ..o };
    assert_eq!(optim::learning_rate(&flat, 1000), 1e-3);
}

#[test]
fn clipping_bounds_the_update_norm() {
    let mut params = ParamStore::new();
    params.insert("w", crate::Tensor::zeros(&[3]));
    let mut grads = ParamStore::new();
    grads.insert("w", crate::Tensor::new(vec![3], vec![30.0, 40.0, 0.0]).unwrap());
    assert_eq!(optim::global_norm(&grads), 50.0);
    let mut opt = optim::Adam::new(OptimConfig {
        warmup_steps: 0,
        ..OptimConfig::default()
    });
    let (lr, norm) = opt.update(&mut params, &grads);
    assert_eq!((lr, norm), (1e-3, 50.0));
    // first Adam step moves each coordinate with a non-zero gradient by ~lr
    let w = params.get("w").unwrap().data();
    assert!((w[0] + 1e-3).abs() < 1e-9 && (w[1] + 1e-3).abs() < 1e-9 && w[2] == 0.0);
}

#[test]
fn decoding_is_repeatable_and_handles_empty_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_run(Mode::Cift, 0);
    for mode in [Mode::Cift, Mode::RnntBaseline] {
        let params = model::init_params(&cfg.model, mode, 5).unwrap();
        let a = eval::decode_all(&params, &cfg.model, mode, &data).unwrap();
        let b = eval::decode_all(&params, &cfg.model, mode, &data).unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        eval::write_hypotheses(&pa, &data, &a).unwrap();
        eval::write_hypotheses(&pb, &data, &b).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

        let empty = eval::decode_all(&params, &cfg.model, mode, &[]).unwrap();
        let pe = dir.path().join("e.jsonl");
        eval::write_hypotheses(&pe, &[], &empty).unwrap();
        assert!(std::fs::read(&pe).unwrap().is_empty());
        assert!(evaluate(&params, &cfg.model, mode, &[]).is_err());
    }
}

#[test]
fn reinit_with_the_original_seed_changes_nothing() {
    let (cfg, data) = tiny_run(Mode::Cift, 0);
    for mode in [Mode::Cift, Mode::RnntBaseline] {
        let params = model::init_params(&cfg.model, mode, 9).unwrap();
        assert_eq!(probe::reinit_predictor(&params, &cfg.model, 9), params);
        let rows = probe::reinit_probe(&params, &cfg.model, mode, &data, &[9]).unwrap();
        assert_eq!(rows[0].delta_cer, 0.0);
        let other = probe::reinit_predictor(&params, &cfg.model, 10);
        assert_ne!(other, params);
    }
}

#[test]
fn config_requires_a_seed_and_rejects_unknown_fields() {
    assert!(matches!(RunConfig::from_json("{}"), Err(crate::Error::Config(_))));
    assert!(matches!(
        RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#),
        Err(crate::Error::Config(_))
    ));
    let c = RunConfig::from_json(r#"{"seed": 4, "mode": "rnnt-baseline"}"#).unwrap();
    assert_eq!((c.seed, c.mode), (4, Mode::RnntBaseline));
    assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    assert!(RunConfig::from_json(r#"{"seed": 1, "batch_size": 0}"#).is_err());
}
