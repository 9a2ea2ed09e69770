use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dctnet::checkpoint::{Checkpoint, Metadata};
use dctnet::data::ChannelStats;
use dctnet::{DctNet, ModelConfig, Tensor};
use dctnet_ffi::*;

const MICRO: &str = r#"{"seq_len": 8, "pred_len": 4, "channels": 2, "patch_len": 4, "stride": 4,
    "latent_dim": 8, "heads": 2, "seed": 3}"#;

fn last_error() -> String {
    let p = dct_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn from_json(json: &str) -> (DctStatus, *mut DctModel) {
    let json = CString::new(json).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { dct_model_from_config_json(json.as_ptr(), &mut model) };
    (status, model)
}

fn micro_config() -> ModelConfig {
    serde_json::from_str(MICRO).unwrap()
}

fn input(batch: usize) -> Vec<f64> {
    (0..batch * 16).map(|i| (i as f64 * 0.37).sin()).collect()
}

#[test]
fn config_model_matches_library_forecast() {
    let (status, model) = from_json(MICRO);
    assert_eq!(status, DctStatus::Ok);
    let (mut l, mut t, mut c) = (0, 0, 0);
    assert_eq!(unsafe { dct_model_dims(model, &mut l, &mut t, &mut c) }, DctStatus::Ok);
    assert_eq!((l, t, c), (8, 4, 2));

    let x = input(2);
    let mut out = vec![0.0; 2 * 4 * 2];
    let status = unsafe { dct_model_forecast(model, 2, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DctStatus::Ok);

    let reference = DctNet::new(micro_config()).unwrap();
    let want = reference.predict(&Tensor::new([2, 8, 2], x).unwrap()).unwrap().values;
    assert_eq!(out, want.data());
    unsafe { dct_model_free(model) };
}

#[test]
fn checkpoint_round_trip_applies_normalisation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dct");
    let stats = ChannelStats {
        mean: vec![5.0, -1.0],
        std: vec![2.0, 0.25],
    };
    let ckpt = Checkpoint {
        model: DctNet::new(micro_config()).unwrap(),
        metadata: Metadata {
            normalization: Some(stats.clone()),
            ..Default::default()
        },
    };
    ckpt.save(&path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dct_model_load(cpath.as_ptr(), &mut model) }, DctStatus::Ok);
    let x = input(1);
    let mut out = vec![0.0; 8];
    let status = unsafe { dct_model_forecast(model, 1, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DctStatus::Ok);

    let xs = stats.standardize(&Tensor::new([1, 8, 2], x).unwrap());
    let want = stats.destandardize(&ckpt.model.predict(&xs).unwrap().values);
    for (a, b) in out.iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let copy = CString::new(dir.path().join("copy.dct").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dct_model_save(model, copy.as_ptr()) }, DctStatus::Ok);
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("copy.dct")).unwrap()
    );
    unsafe { dct_model_free(model) };
}

#[test]
fn error_codes_and_messages() {
    let (status, model) = from_json(r#"{"latent_dim": 7, "heads": 2}"#);
    assert_eq!(status, DctStatus::Config);
    assert!(model.is_null());
    assert!(last_error().contains("latent_dim"), "{}", last_error());

    let (status, _) = from_json("{not json");
    assert_eq!(status, DctStatus::Config);

    let missing = CString::new("/nonexistent/model.dct").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dct_model_load(missing.as_ptr(), &mut model) }, DctStatus::Io);
    assert!(last_error().contains("/nonexistent/model.dct"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.dct");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dct_model_load(junk.as_ptr(), &mut model) }, DctStatus::Checkpoint);

    assert_eq!(unsafe { dct_model_load(ptr::null(), &mut model) }, DctStatus::NullPointer);
    assert_eq!(
        unsafe { dct_model_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) },
        DctStatus::NullPointer
    );
}

#[test]
fn forecast_rejects_bad_lengths_and_values() {
    let (_, model) = from_json(MICRO);
    let x = input(1);
    let mut out = vec![0.0; 8];
    let status = unsafe { dct_model_forecast(model, 1, x.as_ptr(), x.len() - 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DctStatus::InvalidArgument);
    assert!(last_error().contains("input_len 16"));
    let status = unsafe { dct_model_forecast(model, 0, x.as_ptr(), 0, out.as_mut_ptr(), 0) };
    assert_eq!(status, DctStatus::InvalidArgument);

    let mut bad = x.clone();
    bad[3] = f64::NAN;
    let status = unsafe { dct_model_forecast(model, 1, bad.as_ptr(), bad.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DctStatus::Data);

    // A successful call clears the previous message.
    let status = unsafe { dct_model_forecast(model, 1, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DctStatus::Ok);
    assert!(dct_last_error().is_null());
    unsafe { dct_model_free(model) };
    unsafe { dct_model_free(ptr::null_mut()) };
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(dct_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dctnet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "dct_model_load",
        "dct_model_from_config_json",
        "dct_model_save",
        "dct_model_free",
        "dct_model_dims",
        "dct_model_forecast",
        "dct_last_error",
        "dct_version",
        "DCT_STATUS_OK = 0",
        "typedef struct DctModel DctModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }

    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_string());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "dctnet.h"
int run(const char *path) {
    DctModel *m = NULL;
    size_t l, t, c;
    if (dct_model_load(path, &m) != DCT_STATUS_OK) return 1;
    dct_model_dims(m, &l, &t, &c);
    double in[1], out[1];
    DctStatus s = dct_model_forecast(m, 1, in, l * c, out, t * c);
    dct_model_free(m);
    return s == DCT_STATUS_OK ? 0 : (int)s;
}
"#,
    )
    .unwrap();
    match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile check: {cc} unavailable ({e})"),
    }
}
