//! Drives the C surface from Rust and checks every answer against the
//! library called directly.

use std::ffi::{CStr, CString};
use std::fs;
use std::path::Path;
use std::ptr;

use acdc::counts::{count_flops, count_params, FlopConvention};
use acdc::data::synthetic_digits;
use acdc::model::build_model;
use acdc::presets::preset;
use acdc::sharing::{SchemeKind, SharingScheme};
use acdc::Tensor;
use acdc_ffi::{
    acdc_last_error, acdc_model_flops, acdc_model_free, acdc_model_load, acdc_model_new,
    acdc_model_param_count, acdc_model_predict, acdc_model_save, acdc_version, AcdcModel,
    AcdcStatus,
};

fn new_model(preset_name: &str, scheme: &str, m: usize, s: usize, seed: u64) -> *mut AcdcModel {
    let preset_name = CString::new(preset_name).unwrap();
    let scheme = CString::new(scheme).unwrap();
    let mut handle: *mut AcdcModel = ptr::null_mut();
    let status = unsafe {
        acdc_model_new(
            preset_name.as_ptr(),
            scheme.as_ptr(),
            m,
            s,
            seed,
            &mut handle,
        )
    };
    assert_eq!(status, AcdcStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(acdc_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(acdc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn last_error_empty_before_any_failure() {
    // Runs on its own thread, so other tests' failures are not visible.
    assert_eq!(last_error(), "");
}

#[test]
fn param_count_matches_library() {
    let handle = new_model("toy-4layer", "net", 8, 0, 0);
    let mut got = 0u64;
    let status = unsafe { acdc_model_param_count(handle, &mut got) };
    assert_eq!(status, AcdcStatus::Ok);

    let config = preset("toy-4layer").unwrap();
    let scheme = SharingScheme::new(SchemeKind::Net, 8, None).unwrap();
    let want = count_params(&config, scheme).unwrap().total_params;
    assert_eq!(got, want);
    unsafe { acdc_model_free(handle) };
}

#[test]
fn flops_match_library() {
    let handle = new_model("toy-4layer", "baseline", 0, 0, 0);
    let config = preset("toy-4layer").unwrap();
    let [c, h, w] = config.input;
    let mut got = 0u64;
    let status = unsafe { acdc_model_flops(handle, c, h, w, 5, &mut got) };
    assert_eq!(status, AcdcStatus::Ok);

    let want = count_flops(
        &config,
        SharingScheme::baseline(),
        [c, h, w],
        5,
        FlopConvention::default(),
    )
    .unwrap()
    .total_flops;
    assert_eq!(got, want);
    unsafe { acdc_model_free(handle) };
}

#[test]
fn predict_matches_library_forward() {
    let handle = new_model("toy-4layer", "net", 8, 0, 0);
    let ds = synthetic_digits(6, 0);
    let idx: Vec<usize> = (0..6).collect();
    let (x, _): (Tensor<f64>, Vec<usize>) = ds.batch(&idx);

    let mut got = vec![u32::MAX; 6];
    let status = unsafe {
        acdc_model_predict(handle, x.data().as_ptr(), 6, 1, 28, 28, got.as_mut_ptr())
    };
    assert_eq!(status, AcdcStatus::Ok, "{}", last_error());

    let config = preset("toy-4layer").unwrap();
    let scheme = SharingScheme::new(SchemeKind::Net, 8, None).unwrap();
    let mut model = build_model::<f64>(&config, scheme, 0).unwrap();
    let mut tape = acdc::autograd::Tape::new();
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, xv, false, None).unwrap();
    let logits = tape.value(out.logits);
    let classes = logits.shape()[1];
    let want: Vec<u32> = (0..6)
        .map(|i| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() as u32
        })
        .collect();
    assert_eq!(got, want);
    unsafe { acdc_model_free(handle) };
}

#[test]
fn save_load_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let handle = new_model("toy-4layer", "g-net", 6, 2, 7);
    let status = unsafe { acdc_model_save(handle, cpath.as_ptr()) };
    assert_eq!(status, AcdcStatus::Ok, "{}", last_error());

    let mut reloaded: *mut AcdcModel = ptr::null_mut();
    let status = unsafe { acdc_model_load(cpath.as_ptr(), &mut reloaded) };
    assert_eq!(status, AcdcStatus::Ok, "{}", last_error());

    let mut n1 = 0u64;
    let mut n2 = 0u64;
    unsafe {
        assert_eq!(acdc_model_param_count(handle, &mut n1), AcdcStatus::Ok);
        assert_eq!(acdc_model_param_count(reloaded, &mut n2), AcdcStatus::Ok);
    }
    assert_eq!(n1, n2);

    let ds = synthetic_digits(4, 1);
    let idx: Vec<usize> = (0..4).collect();
    let (x, _): (Tensor<f64>, Vec<usize>) = ds.batch(&idx);
    let mut p1 = vec![0u32; 4];
    let mut p2 = vec![0u32; 4];
    unsafe {
        assert_eq!(
            acdc_model_predict(handle, x.data().as_ptr(), 4, 1, 28, 28, p1.as_mut_ptr()),
            AcdcStatus::Ok
        );
        assert_eq!(
            acdc_model_predict(reloaded, x.data().as_ptr(), 4, 1, 28, 28, p2.as_mut_ptr()),
            AcdcStatus::Ok
        );
        acdc_model_free(handle);
        acdc_model_free(reloaded);
    }
    assert_eq!(p1, p2);
}

#[test]
fn errors_map_to_statuses_and_messages() {
    let mut handle: *mut AcdcModel = ptr::null_mut();
    let toy = CString::new("toy-4layer").unwrap();
    let net = CString::new("net").unwrap();

    let status = unsafe { acdc_model_new(ptr::null(), net.as_ptr(), 8, 0, 0, &mut handle) };
    assert_eq!(status, AcdcStatus::NullPointer);
    assert!(last_error().contains("null"));

    let bad = CString::new("no-such-preset").unwrap();
    let status = unsafe { acdc_model_new(bad.as_ptr(), net.as_ptr(), 8, 0, 0, &mut handle) };
    assert_eq!(status, AcdcStatus::ConfigError);
    assert!(last_error().contains("no-such-preset"));

    let bad = CString::new("fourier").unwrap();
    let status = unsafe { acdc_model_new(toy.as_ptr(), bad.as_ptr(), 8, 0, 0, &mut handle) };
    assert_eq!(status, AcdcStatus::ConfigError);
    assert!(last_error().contains("fourier"));

    let baseline = CString::new("baseline").unwrap();
    let status = unsafe { acdc_model_new(toy.as_ptr(), baseline.as_ptr(), 8, 0, 0, &mut handle) };
    assert_eq!(status, AcdcStatus::ConfigError);

    let not_utf8 = [0xffu8, 0x00];
    let status = unsafe {
        acdc_model_new(
            not_utf8.as_ptr().cast(),
            net.as_ptr(),
            8,
            0,
            0,
            &mut handle,
        )
    };
    assert_eq!(status, AcdcStatus::InvalidUtf8);

    let missing = CString::new("/no/such/dir/model.ckpt").unwrap();
    let status = unsafe { acdc_model_load(missing.as_ptr(), &mut handle) };
    assert_eq!(status, AcdcStatus::IoError);
    assert!(handle.is_null(), "out parameter must stay untouched on failure");
}

#[test]
fn predict_rejects_wrong_shape() {
    let handle = new_model("toy-4layer", "net", 8, 0, 0);
    let x = vec![0.0f64; 2 * 3 * 16 * 16];
    let mut picks = vec![0u32; 2];
    let status =
        unsafe { acdc_model_predict(handle, x.as_ptr(), 2, 3, 16, 16, picks.as_mut_ptr()) };
    assert_eq!(status, AcdcStatus::ConfigError);
    assert!(last_error().contains("does not match model input"));
    unsafe { acdc_model_free(handle) };
}

#[test]
fn generated_header_covers_the_surface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/acdc.h");
    let text = fs::read_to_string(&header).expect("header generated by the build script");
    for needle in [
        "#ifndef ACDC_H",
        "typedef struct AcdcModel AcdcModel;",
        "ACDC_STATUS_OK = 0",
        "ACDC_STATUS_CONFIG_ERROR = 2",
        "acdc_version",
        "acdc_last_error",
        "acdc_model_new",
        "acdc_model_load",
        "acdc_model_save",
        "acdc_model_free",
        "acdc_model_param_count",
        "acdc_model_flops",
        "acdc_model_predict",
    ] {
        assert!(text.contains(needle), "header is missing `{needle}`");
    }
}
