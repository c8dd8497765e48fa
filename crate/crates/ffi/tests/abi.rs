use std::ffi::{CStr, CString};
use std::ptr;

use cift::harness::{checkpoint, eval, RunConfig};
use cift::losses::{ctc_nll, rnnt_nll};
use cift::model::{init_params, Mode, ModelConfig};
use cift::Tensor;
use cift_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cift_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cift_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn losses_match_the_library() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let logits = Tensor::randn(&[5, 4], 1.0, &mut r);
    let (want, want_grad) = ctc_nll(&logits, &[0, 2]).unwrap();
    let (mut loss, mut grad) = (0.0, vec![0.0; 20]);
    let s = unsafe {
        cift_ctc_loss(
            logits.data().as_ptr(),
            5,
            4,
            [0u32, 2].as_ptr(),
            2,
            &mut loss,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(s, CiftStatus::Ok);
    assert_eq!(loss, want);
    assert_eq!(grad, want_grad);

    let logits = Tensor::randn(&[3, 3, 4], 1.0, &mut r);
    let (want, _) = rnnt_nll(&logits, &[1, 1]).unwrap();
    let s = unsafe {
        cift_rnnt_loss(
            logits.data().as_ptr(),
            3,
            4,
            [1u32, 1].as_ptr(),
            2,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, CiftStatus::Ok);
    assert_eq!(loss, want);
}

#[test]
fn errors_map_to_status_codes() {
    let logits = [0.0f64; 4 * 2];
    let mut loss = 0.0;
    // two frames cannot emit a repeated pair
    let s = unsafe { cift_ctc_loss(logits.as_ptr(), 2, 4, [1u32, 1].as_ptr(), 2, &mut loss, ptr::null_mut()) };
    assert_eq!(s, CiftStatus::Data);
    assert!(last_error().contains("infeasible"));
    // token outside the vocabulary
    let s = unsafe { cift_ctc_loss(logits.as_ptr(), 2, 4, [7u32].as_ptr(), 1, &mut loss, ptr::null_mut()) };
    assert_eq!(s, CiftStatus::Data);
    let s = unsafe { cift_ctc_loss(ptr::null(), 2, 4, [0u32].as_ptr(), 1, &mut loss, ptr::null_mut()) };
    assert_eq!(s, CiftStatus::NullPointer);
    let s = unsafe {
        cift_ctc_loss(
            logits.as_ptr(),
            2,
            4,
            [0u32].as_ptr(),
            1,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, CiftStatus::NullPointer);

    let mut fire = ptr::null_mut();
    let s = unsafe { cift_cif_fire([1.0].as_ptr(), [0.5].as_ptr(), 1, 1, 0.0, -1, 0.5, &mut fire) };
    assert_eq!(s, CiftStatus::Config);
    assert!(fire.is_null());
    // a success clears the message
    let s = unsafe { cift_cif_fire([1.0].as_ptr(), [0.5].as_ptr(), 1, 1, 1.0, -1, 0.5, &mut fire) };
    assert_eq!(s, CiftStatus::Ok);
    assert!(last_error().is_empty());
    unsafe { cift_fire_free(fire) };
}

#[test]
fn fire_hand_example() {
    // columns pick out each frame's contribution
    let h = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let alpha = [0.4, 0.7, 0.9];
    let mut f = ptr::null_mut();
    let s = unsafe { cift_cif_fire(h.as_ptr(), alpha.as_ptr(), 3, 3, 1.0, -1, 0.5, &mut f) };
    assert_eq!(s, CiftStatus::Ok);
    unsafe {
        assert_eq!(cift_fire_count(f), 2);
        assert_eq!(cift_fire_dim(f), 3);
        let e = std::slice::from_raw_parts(cift_fire_embeddings(f), 6);
        assert_eq!(e[0], 0.4);
        assert!((e[1] - 0.6).abs() < 1e-15 && (e[4] - 0.1).abs() < 1e-15);
        assert_eq!(e[5], 0.9);
        let mut n = 0;
        let b = std::slice::from_raw_parts(cift_fire_boundaries(f, &mut n), 2);
        assert_eq!(n, 2);
        assert_eq!((b[0].frame, b[1].frame), (1, 2));
        assert_eq!(b[0].first + b[0].second, b[0].available);
        assert!(cift_fire_residue(f).abs() < 1e-15);
        assert!((cift_fire_consumed(f) - 2.0).abs() < 1e-15);
        cift_fire_free(f);
    }
    let mut f = ptr::null_mut();
    let s = unsafe { cift_cif_fire(h.as_ptr(), [0.5, 0.5, 1.0].as_ptr(), 3, 3, 1.0, 2, 0.5, &mut f) };
    assert_eq!(s, CiftStatus::Ok);
    unsafe {
        assert_eq!(cift_fire_count(f), 2);
        cift_fire_free(f);
    }
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    for (mode, code) in [
        (Mode::Cift, CiftMode::Cift),
        (Mode::RnntBaseline, CiftMode::RnntBaseline),
    ] {
        let params = init_params(&model, mode, 3).unwrap();
        let cfg = RunConfig {
            mode,
            model: model.clone(),
            ..RunConfig::default()
        };
        let path = dir.path().join(format!("{mode}.ckpt"));
        checkpoint::save(&path, &params, &cfg).unwrap();
        let cpath = CString::new(path.to_str().unwrap()).unwrap();

        let mut m = ptr::null_mut();
        assert_eq!(unsafe { cift_model_load(cpath.as_ptr(), &mut m) }, CiftStatus::Ok);
        let mut info = CiftModelInfo::default();
        assert_eq!(unsafe { cift_model_info(m, &mut info) }, CiftStatus::Ok);
        assert_eq!(info.mode, code as u32);
        assert_eq!((info.vocab, info.feat_dim), (model.vocab, model.feat_dim));
        assert_eq!(info.num_parameters, params.num_scalars());

        let feats = Tensor::randn(&[16, model.feat_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let utt = cift::data::Utterance {
            id: String::new(),
            features: feats.clone(),
            targets: vec![],
            spans: None,
        };
        let want = eval::decode_one(&params, &model, mode, &utt).unwrap();
        let mut d = ptr::null_mut();
        let s = unsafe { cift_model_decode(m, feats.data().as_ptr(), 16, model.feat_dim, &mut d) };
        assert_eq!(s, CiftStatus::Ok);
        unsafe {
            let n = cift_decode_len(d);
            let toks: Vec<usize> = if n == 0 {
                vec![]
            } else {
                std::slice::from_raw_parts(cift_decode_tokens(d), n)
                    .iter()
                    .map(|&t| t as usize)
                    .collect()
            };
            assert_eq!(toks, want.tokens);
            assert_eq!(cift_decode_fire_count(d), want.fire_count);
            if n > 0 {
                assert_eq!(std::slice::from_raw_parts(cift_decode_top1(d), n), &want.top1()[..]);
                assert_eq!(
                    std::slice::from_raw_parts(cift_decode_frames(d), n),
                    &want.boundaries[..]
                );
            }
            cift_decode_free(d);
        }

        let s = unsafe { cift_model_decode(m, feats.data().as_ptr(), 16, model.feat_dim + 1, &mut d) };
        assert_eq!(s, CiftStatus::InvalidArgument);
        assert!(d.is_null());
        unsafe { cift_model_free(m) };
    }

    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let cpath = CString::new(junk.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cift_model_load(cpath.as_ptr(), &mut m) }, CiftStatus::Config);
    assert!(m.is_null());
    let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cift_model_load(missing.as_ptr(), &mut m) }, CiftStatus::Data);
    assert_eq!(unsafe { cift_model_load(ptr::null(), &mut m) }, CiftStatus::NullPointer);
    unsafe {
        cift_model_free(ptr::null_mut());
        cift_decode_free(ptr::null_mut());
        cift_fire_free(ptr::null_mut());
        assert_eq!(cift_decode_len(ptr::null()), 0);
    }
}
