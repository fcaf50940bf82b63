//! C interface over the `acdc` library.
//!
//! Every function returns an [`AcdcStatus`]; on failure a message is
//! recorded per thread and can be read back with [`acdc_last_error`].
//! Models travel across the boundary as opaque [`AcdcModel`] handles that
//! own an f64-precision model; release them with [`acdc_model_free`].
//! Out-parameters are written only when the call returns `ACDC_STATUS_OK`.
//!
//! The generated header lives at `include/acdc.h` and is kept current by
//! the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::slice;

use acdc::autograd::Tape;
use acdc::checkpoint::{load_model, save_model};
use acdc::counts::{count_flops, count_params, FlopConvention};
use acdc::model::{build_model, Model};
use acdc::presets::preset;
use acdc::sharing::{SchemeKind, SharingScheme};
use acdc::{Error, Tensor};

/// Result code for every call. Values 2 to 4 match the CLI exit codes for
/// the same failure classes; 5 and 6 cover boundary conditions that only
/// exist at the C surface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcdcStatus {
    Ok = 0,
    ConfigError = 2,
    NumericError = 3,
    IoError = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
}

/// Opaque handle to a model held at f64 precision. Checkpoints written at
/// f32 load fine; values are cast on the way in.
pub struct AcdcModel {
    inner: Model<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // Interior NULs would make the message untransportable as a C string.
    let cleaned: String = msg
        .chars()
        .map(|c| if c == '\0' { ' ' } else { c })
        .collect();
    let cstr = CString::new(cleaned).expect("scrubbed message has no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = cstr);
}

fn fail(e: &Error) -> AcdcStatus {
    set_error(&e.to_string());
    match e {
        Error::Config(_) => AcdcStatus::ConfigError,
        Error::Numeric(_) => AcdcStatus::NumericError,
        Error::Io(_) => AcdcStatus::IoError,
    }
}

/// Checks a raw C string and borrows it as UTF-8.
unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, AcdcStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} pointer is null"));
        return Err(AcdcStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(AcdcStatus::InvalidUtf8)
        }
    }
}

fn null_check<P>(ptr: *const P, what: &str) -> Result<(), AcdcStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} pointer is null"));
        return Err(AcdcStatus::NullPointer);
    }
    Ok(())
}

fn parse_scheme(name: &str, m: usize, s: usize) -> acdc::Result<SharingScheme> {
    let kind = SchemeKind::from_cli_name(name)?;
    if kind == SchemeKind::PerLayer {
        if m != 0 || s != 0 {
            return Err(Error::config("baseline takes neither m nor s; pass 0 for both"));
        }
        return Ok(SharingScheme::baseline());
    }
    SharingScheme::new(kind, m, if s == 0 { None } else { Some(s) })
}

/// Returns the library version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn acdc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Returns the message recorded by the most recent failing call on this
/// thread, or an empty string if nothing has failed yet. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn acdc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a model from a preset name (toy-4layer, vgg16, resnet18,
/// wrn-40-4, wrn-28-10) and a sharing scheme named as on the CLI
/// (baseline, net, block, g-net, g-block, g-layer). `m` is the atom count
/// per substructure; `s` is the group size, with 0 meaning ungrouped for
/// g-layer and whole-extent groups otherwise. Baseline requires `m` and
/// `s` to be 0. Initialization is seeded, so equal arguments rebuild
/// identical parameters.
#[no_mangle]
pub unsafe extern "C" fn acdc_model_new(
    preset_name: *const c_char,
    scheme: *const c_char,
    m: usize,
    s: usize,
    seed: u64,
    out: *mut *mut AcdcModel,
) -> AcdcStatus {
    let preset_name = match cstr_arg(preset_name, "preset name") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let scheme = match cstr_arg(scheme, "scheme name") {
        Ok(s) => s,
        Err(st) => return st,
    };
    if let Err(st) = null_check(out, "output handle") {
        return st;
    }
    let built = (|| {
        let config = preset(preset_name)?;
        let scheme = parse_scheme(scheme, m, s)?;
        build_model::<f64>(&config, scheme, seed)
    })();
    match built {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(AcdcModel { inner }));
            AcdcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Reads a checkpoint produced by the CLI or by `acdc_model_save`.
#[no_mangle]
pub unsafe extern "C" fn acdc_model_load(
    path: *const c_char,
    out: *mut *mut AcdcModel,
) -> AcdcStatus {
    let path = match cstr_arg(path, "checkpoint path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    if let Err(st) = null_check(out, "output handle") {
        return st;
    }
    match load_model::<f64>(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(AcdcModel { inner }));
            AcdcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Writes the model as a checkpoint readable by the CLI and
/// `acdc_model_load`.
#[no_mangle]
pub unsafe extern "C" fn acdc_model_save(
    model: *const AcdcModel,
    path: *const c_char,
) -> AcdcStatus {
    if let Err(st) = null_check(model, "model") {
        return st;
    }
    let path = match cstr_arg(path, "checkpoint path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    match save_model(&(*model).inner, Path::new(path)) {
        Ok(()) => AcdcStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Releases a handle. Passing NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn acdc_model_free(model: *mut AcdcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the stored parameter count (decomposed storage, not the
/// reconstructed dense kernels).
#[no_mangle]
pub unsafe extern "C" fn acdc_model_param_count(
    model: *const AcdcModel,
    out: *mut u64,
) -> AcdcStatus {
    if let Err(st) = null_check(model, "model") {
        return st;
    }
    if let Err(st) = null_check(out, "output") {
        return st;
    }
    let m = &(*model).inner;
    match count_params(&m.config, m.scheme) {
        Ok(report) => {
            *out = report.total_params;
            AcdcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Writes the total forward FLOPs for a batch at the given input shape
/// under the default convention: one FLOP per multiply-accumulate, with
/// kernels reconstructed once per batch.
#[no_mangle]
pub unsafe extern "C" fn acdc_model_flops(
    model: *const AcdcModel,
    channels: usize,
    height: usize,
    width: usize,
    batch: usize,
    out: *mut u64,
) -> AcdcStatus {
    if let Err(st) = null_check(model, "model") {
        return st;
    }
    if let Err(st) = null_check(out, "output") {
        return st;
    }
    if batch == 0 {
        return fail(&Error::config("batch size must be at least 1"));
    }
    let m = &(*model).inner;
    let report = count_flops(
        &m.config,
        m.scheme,
        [channels, height, width],
        batch,
        FlopConvention::default(),
    );
    match report {
        Ok(report) => {
            *out = report.total_flops;
            AcdcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Runs an evaluation forward pass on a batch of images and writes the
/// predicted class per image. `input` holds `batch * channels * height *
/// width` f64 values in NCHW order and the shape must match the model's
/// input; `classes_out` receives `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn acdc_model_predict(
    model: *mut AcdcModel,
    input: *const f64,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    classes_out: *mut u32,
) -> AcdcStatus {
    if let Err(st) = null_check(model, "model") {
        return st;
    }
    if let Err(st) = null_check(input, "input") {
        return st;
    }
    if let Err(st) = null_check(classes_out, "classes output") {
        return st;
    }
    let m = &mut (*model).inner;
    if batch == 0 {
        return fail(&Error::config("batch size must be at least 1"));
    }
    let expect = m.config.input;
    if [channels, height, width] != expect {
        return fail(&Error::config(format!(
            "input shape {channels}x{height}x{width} does not match model input {}x{}x{}",
            expect[0], expect[1], expect[2]
        )));
    }
    let n = batch * channels * height * width;
    let data = slice::from_raw_parts(input, n).to_vec();
    let result = (|| -> acdc::Result<Vec<u32>> {
        let x = Tensor::from_vec(&[batch, channels, height, width], data)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = m.forward(&mut tape, xv, false, None)?;
        let logits = tape.value(out.logits);
        let classes = logits.shape()[1];
        let mut picks = Vec::with_capacity(batch);
        for i in 0..batch {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            picks.push(best as u32);
        }
        Ok(picks)
    })();
    match result {
        Ok(picks) => {
            for (i, p) in picks.iter().enumerate() {
                *classes_out.add(i) = *p;
            }
            AcdcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
