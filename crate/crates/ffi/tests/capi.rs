//! Exercises the C ABI exactly as a foreign caller would: raw pointers,
//! status codes, and the last-error channel.

use genreg::checkpoint::{Checkpoint, HeadParams};
use genreg::data::{split, synth_longtail, SynthParams};
use genreg::model::ModelConfig;
use genreg::training::{train, TrainConfig};
use genreg::vocab::{build_dynamic, DynamicParams};
use genreg_ffi::*;
use std::ffi::CString;
use std::path::PathBuf;
use std::ptr;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("genreg_ffi_{tag}_{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe {
        let needed = genreg_last_error(ptr::null_mut(), 0);
        let mut buf = vec![0 as std::ffi::c_char; needed + 1];
        genreg_last_error(buf.as_mut_ptr(), buf.len());
        std::ffi::CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn vocab_build_encode_decode_roundtrip() {
    let ds = synth_longtail(2000, 3, 7, SynthParams::default()).unwrap();
    unsafe {
        let mut vocab: *mut GenregVocab = ptr::null_mut();
        let status = genreg_vocab_build_dynamic(
            ds.targets.as_ptr(),
            ds.targets.len(),
            99.0,
            50.0,
            0.95,
            0.001,
            0.01,
            128,
            &mut vocab,
        );
        assert_eq!(status, GenregStatus::Ok, "{}", last_error());
        assert!(!vocab.is_null());
        let n = genreg_vocab_len(vocab);
        assert!(n > 0);
        let mut first = 0.0;
        assert_eq!(genreg_vocab_value(vocab, 0, &mut first), GenregStatus::Ok);
        let mut second = 0.0;
        assert_eq!(genreg_vocab_value(vocab, 1, &mut second), GenregStatus::Ok);
        assert!(first > second, "descending values expected");
        assert_eq!(
            genreg_vocab_value(vocab, n, &mut first),
            GenregStatus::InvalidArgument
        );

        // Round-trip a handful of targets through the C surface.
        for &y in ds.targets.iter().take(200) {
            let mut ids = [0u32; 64];
            let mut len = 0usize;
            let mut residual = 0.0f64;
            let status = genreg_encode(vocab, y, 32, ids.as_mut_ptr(), 64, &mut len, &mut residual);
            assert_eq!(status, GenregStatus::Ok, "{}", last_error());
            let mut back = 0.0f64;
            assert_eq!(
                genreg_decode(vocab, ids.as_ptr(), len, &mut back),
                GenregStatus::Ok
            );
            assert!((y - back).abs() <= 0.001 * y + 1e-12, "y={y} back={back}");
        }
        genreg_vocab_free(vocab);
    }
}

#[test]
fn vocab_save_load_through_files() {
    let dir = temp_dir("vocab");
    let ds = synth_longtail(500, 2, 9, SynthParams::default()).unwrap();
    let path = dir.join("vocab.json");
    unsafe {
        let mut vocab: *mut GenregVocab = ptr::null_mut();
        assert_eq!(
            genreg_vocab_build_dynamic(
                ds.targets.as_ptr(),
                ds.targets.len(),
                99.0,
                50.0,
                0.95,
                0.001,
                0.01,
                128,
                &mut vocab,
            ),
            GenregStatus::Ok
        );
        let cp = c_path(&path);
        assert_eq!(genreg_vocab_save(vocab, cp.as_ptr()), GenregStatus::Ok);
        let n = genreg_vocab_len(vocab);
        genreg_vocab_free(vocab);

        let mut loaded: *mut GenregVocab = ptr::null_mut();
        assert_eq!(genreg_vocab_load(cp.as_ptr(), &mut loaded), GenregStatus::Ok);
        assert_eq!(genreg_vocab_len(loaded), n);
        genreg_vocab_free(loaded);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn null_and_missing_inputs_report_errors() {
    unsafe {
        let mut vocab: *mut GenregVocab = ptr::null_mut();
        assert_eq!(
            genreg_vocab_build_dynamic(
                ptr::null(),
                0,
                99.0,
                50.0,
                0.95,
                0.001,
                0.01,
                128,
                &mut vocab
            ),
            GenregStatus::NullArgument
        );
        assert!(!last_error().is_empty());

        let missing = CString::new("/nonexistent/v.json").unwrap();
        assert_eq!(
            genreg_vocab_load(missing.as_ptr(), &mut vocab),
            GenregStatus::Parse
        );

        let mut model: *mut GenregModel = ptr::null_mut();
        assert_eq!(
            genreg_model_load(missing.as_ptr(), ptr::null(), &mut model),
            GenregStatus::Parse
        );
        assert_eq!(genreg_model_head(ptr::null()), -1);
    }
}

#[test]
fn model_load_and_predict_matches_library() {
    let dir = temp_dir("model");
    let ds = synth_longtail(240, 3, 5, SynthParams::default()).unwrap();
    let (train_ds, val_ds) = split(&ds, 0.8, 5).unwrap();
    let vocab = build_dynamic(&train_ds.targets, DynamicParams::default()).unwrap();
    let vocab_path = dir.join("vocab.json");
    vocab.save(&vocab_path).unwrap();

    let model_cfg = ModelConfig {
        feature_dim: 3,
        hidden_dim: 16,
        encoder_layers: 2,
        decoder_blocks: 1,
        attention_heads: 2,
        ffn_mult: 2,
        vocab_size: vocab.vocab_size(),
        t_max: 16,
        seed: 5,
    };
    let cfg = TrainConfig {
        steps: 80,
        eval_interval: 40,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&train_ds, &val_ds, &vocab, &model_cfg, &cfg).unwrap();
    let expected = {
        let z = out.standardizer.apply_row(&val_ds.features[0]);
        genreg::inference::predict(
            &z,
            &out.params,
            &vocab,
            model_cfg.t_max,
            out.inference_mixup_window > 0,
            out.inference_mixup_window,
        )
        .unwrap()
        .y
    };
    let ckpt = Checkpoint {
        head: HeadParams::Gr(out.params),
        standardizer: out.standardizer,
        mixup_window: out.inference_mixup_window,
        vocab_fingerprint: genreg::fingerprint::fingerprint_bytes(
            &std::fs::read(&vocab_path).unwrap(),
        ),
    };
    let ckpt_path = dir.join("model.ckpt");
    ckpt.save(&ckpt_path).unwrap();

    unsafe {
        let cp = c_path(&ckpt_path);
        let vp = c_path(&vocab_path);

        // Generative checkpoints demand their vocabulary.
        let mut model: *mut GenregModel = ptr::null_mut();
        assert_eq!(
            genreg_model_load(cp.as_ptr(), ptr::null(), &mut model),
            GenregStatus::InvalidArgument
        );

        assert_eq!(
            genreg_model_load(cp.as_ptr(), vp.as_ptr(), &mut model),
            GenregStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(genreg_model_head(model), 0);
        assert_eq!(genreg_model_feature_dim(model), 3);

        let x = &val_ds.features[0];
        let mut y = -1.0f64;
        assert_eq!(
            genreg_model_predict(model, x.as_ptr(), x.len(), &mut y),
            GenregStatus::Ok
        );
        // The checkpoint stores f32 parameters, so allow that rounding.
        assert!(
            (y - expected).abs() < 0.05 * expected.abs().max(1.0),
            "ffi {y} vs library {expected}"
        );

        // Wrong feature length is rejected.
        let short = [0.0f64; 1];
        assert_eq!(
            genreg_model_predict(model, short.as_ptr(), 1, &mut y),
            GenregStatus::InvalidArgument
        );
        genreg_model_free(model);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn version_is_a_c_string() {
    let v = genreg_version();
    assert!(!v.is_null());
    let s = unsafe { std::ffi::CStr::from_ptr(v) }.to_str().unwrap();
    assert!(!s.is_empty());
}
