//! C ABI over the phantom generator, integration-level dropout, lesion
//! detection metrics and fusion-model inference.
//!
//! Every function returns a [`SqfStatus`]; on failure a message is available
//! from [`sqf_last_error`] on the calling thread. Objects are opaque handles
//! released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqfuse::detect::{build_report, evaluate_volume};
use seqfuse::fusenet::{FusionConfig, FusionModel, ModelError};
use seqfuse::grid::Mask3;
use seqfuse::nn::Tensor;
use seqfuse::phantom::{canonical_sequences, generate_phantom, PhantomError, PhantomSpec, StudyVolume};
use seqfuse::seqdrop::{draw_drop_mask, DropPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Model = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// One generated phantom patient.
pub struct SqfVolume {
    inner: StudyVolume,
}

/// A loaded or freshly built fusion model.
pub struct SqfModel {
    inner: FusionModel,
}

/// Pooled detection scores for one volume. Undefined values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqfDetection {
    pub map_score: f64,
    pub max_sensitivity: f64,
    pub mean_tp_dice: f64,
    pub n_gt: usize,
    pub n_predictions: usize,
    pub n_true_positives: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Failure = (SqfStatus, String);

fn fail<T>(status: SqfStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err((status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SqfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SqfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SqfStatus::Panic
        }
    }
}

fn model_failure(e: ModelError) -> Failure {
    let status = match e {
        ModelError::Config(_) => SqfStatus::Config,
        ModelError::Io { .. } => SqfStatus::Io,
        ModelError::Shape(_) | ModelError::Usage(_) => SqfStatus::InvalidArgument,
        ModelError::Checkpoint(_) => SqfStatus::Model,
    };
    (status, e.to_string())
}

fn phantom_failure(e: PhantomError) -> Failure {
    let status = match e {
        PhantomError::InvalidSpec(_) | PhantomError::Capacity { .. } => SqfStatus::Config,
        _ => SqfStatus::Io,
    };
    (status, e.to_string())
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(SqfStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(SqfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(SqfStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(SqfStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| (SqfStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sqf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sqf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default phantom spec as JSON. Free with [`sqf_string_free`].
///
/// # Safety
/// `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sqf_default_phantom_spec(out_json: *mut *mut c_char) -> SqfStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let json = serde_json::to_string(&PhantomSpec::default()).expect("spec serialises");
        *slot = CString::new(json).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sqf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates one phantom patient from a JSON spec.
///
/// # Safety
/// `spec_json` and `patient_id` must be NUL-terminated; `out_volume` valid.
#[no_mangle]
pub unsafe extern "C" fn sqf_phantom_generate(
    spec_json: *const c_char,
    patient_id: *const c_char,
    out_volume: *mut *mut SqfVolume,
) -> SqfStatus {
    guard(|| {
        let slot = out(out_volume, "out_volume")?;
        let spec: PhantomSpec = serde_json::from_str(text(spec_json, "spec_json")?)
            .or_else(|e| fail(SqfStatus::Config, format!("phantom spec: {e}")))?;
        let id = text(patient_id, "patient_id")?;
        let inner = generate_phantom(&spec, id).map_err(phantom_failure)?;
        *slot = Box::into_raw(Box::new(SqfVolume { inner }));
        Ok(())
    })
}

/// # Safety
/// `volume` must come from [`sqf_phantom_generate`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sqf_volume_free(volume: *mut SqfVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Writes `(z, y, x)` voxel counts into `out_shape[0..3]`.
///
/// # Safety
/// `volume` must be a live handle and `out_shape` hold three values.
#[no_mangle]
pub unsafe extern "C" fn sqf_volume_shape(volume: *const SqfVolume, out_shape: *mut usize) -> SqfStatus {
    guard(|| {
        let v = volume.as_ref().ok_or((SqfStatus::NullPointer, "volume is null".into()))?;
        let shape = v.inner.shape().unwrap_or([0, 0, 0]);
        slice_mut(out_shape, 3, "out_shape")?.copy_from_slice(&shape);
        Ok(())
    })
}

/// Number of lesion components in the ground truth.
///
/// # Safety
/// `volume` must be a live handle; `out_count` valid.
#[no_mangle]
pub unsafe extern "C" fn sqf_volume_lesion_count(volume: *const SqfVolume, out_count: *mut usize) -> SqfStatus {
    guard(|| {
        let v = volume.as_ref().ok_or((SqfStatus::NullPointer, "volume is null".into()))?;
        *out(out_count, "out_count")? = v.inner.gt_lesion_count;
        Ok(())
    })
}

/// Copies the named sequence into `buffer` (z-major, `len` floats).
///
/// # Safety
/// `volume` must be a live handle, `name` NUL-terminated and `buffer` hold
/// `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sqf_volume_copy_sequence(
    volume: *const SqfVolume,
    name: *const c_char,
    buffer: *mut f32,
    len: usize,
) -> SqfStatus {
    guard(|| {
        let v = volume.as_ref().ok_or((SqfStatus::NullPointer, "volume is null".into()))?;
        let name = text(name, "name")?;
        let grid = v
            .inner
            .sequences
            .get(name)
            .ok_or((SqfStatus::InvalidArgument, format!("no sequence {name:?}")))?;
        if len < grid.data().len() {
            return fail(SqfStatus::BufferTooSmall, format!("need {} floats, got {len}", grid.data().len()));
        }
        slice_mut(buffer, len, "buffer")?[..grid.data().len()].copy_from_slice(grid.data());
        Ok(())
    })
}

/// Copies the ground-truth mask as 0/1 bytes.
///
/// # Safety
/// `volume` must be a live handle and `buffer` hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sqf_volume_copy_mask(volume: *const SqfVolume, buffer: *mut u8, len: usize) -> SqfStatus {
    guard(|| {
        let v = volume.as_ref().ok_or((SqfStatus::NullPointer, "volume is null".into()))?;
        let m = v
            .inner
            .gt_mask
            .as_ref()
            .ok_or((SqfStatus::InvalidArgument, "volume has no ground truth".into()))?;
        if len < m.data().len() {
            return fail(SqfStatus::BufferTooSmall, format!("need {} bytes, got {len}", m.data().len()));
        }
        for (d, &b) in slice_mut(buffer, len, "buffer")?.iter_mut().zip(m.data()) {
            *d = b as u8;
        }
        Ok(())
    })
}

/// Draws one integration-level dropout mask: `out_present[i]` is 1 for kept
/// sequences. `out_scale` receives the survivor upweighting factor.
///
/// # Safety
/// `out_present` must hold `n_seq` bytes; `out_scale` may be null.
#[no_mangle]
pub unsafe extern "C" fn sqf_draw_drop_mask(
    p_drop: f64,
    n_seq: usize,
    seed: u64,
    out_present: *mut u8,
    out_scale: *mut f64,
) -> SqfStatus {
    guard(|| {
        let policy = DropPolicy::with_p(p_drop);
        policy
            .validate()
            .or_else(|e| fail(SqfStatus::InvalidArgument, e.to_string()))?;
        if n_seq == 0 {
            return fail(SqfStatus::InvalidArgument, "n_seq must be at least 1");
        }
        let dst = slice_mut(out_present, n_seq, "out_present")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = draw_drop_mask(&policy, n_seq, &mut rng);
        for (d, &p) in dst.iter_mut().zip(mask.present()) {
            *d = p as u8;
        }
        if let Some(s) = out_scale.as_mut() {
            *s = mask.scale();
        }
        Ok(())
    })
}

/// Lesion detection scores of one probability volume against a 0/1 mask.
///
/// # Safety
/// `prob` and `mask` must each hold `shape[0]·shape[1]·shape[2]` values,
/// `shape` and `spacing_mm` three values each.
#[no_mangle]
pub unsafe extern "C" fn sqf_evaluate(
    prob: *const f64,
    mask: *const u8,
    shape: *const usize,
    spacing_mm: *const f64,
    out_detection: *mut SqfDetection,
) -> SqfStatus {
    guard(|| {
        let s = slice(shape, 3, "shape")?;
        let shape = [s[0], s[1], s[2]];
        let sp = slice(spacing_mm, 3, "spacing_mm")?;
        if sp.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return fail(SqfStatus::InvalidArgument, "spacing must be positive");
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or((SqfStatus::InvalidArgument, "shape overflows".into()))?;
        let prob = slice(prob, n, "prob")?;
        let m = slice(mask, n, "mask")?;
        let mask = Mask3::from_vec(shape, m.iter().map(|&b| b != 0).collect()).expect("length matches shape");
        let eval = evaluate_volume("ffi", prob, &mask, [sp[0], sp[1], sp[2]])
            .or_else(|e| fail(SqfStatus::InvalidArgument, e.to_string()))?;
        let r = build_report(&[eval]);
        *out(out_detection, "out_detection")? = SqfDetection {
            map_score: r.map_score,
            max_sensitivity: r.max_sensitivity.unwrap_or(f64::NAN),
            mean_tp_dice: r.mean_tp_dice.unwrap_or(f64::NAN),
            n_gt: r.n_gt,
            n_predictions: r.n_predictions,
            n_true_positives: r.n_true_positives,
        };
        Ok(())
    })
}

/// Builds a freshly initialised model from a JSON fusion config.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out_model` valid.
#[no_mangle]
pub unsafe extern "C" fn sqf_model_build(
    config_json: *const c_char,
    seed: u64,
    out_model: *mut *mut SqfModel,
) -> SqfStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let cfg: FusionConfig = serde_json::from_str(text(config_json, "config_json")?)
            .or_else(|e| fail(SqfStatus::Config, format!("fusion config: {e}")))?;
        let inner = FusionModel::build(cfg, seed).map_err(model_failure)?;
        *slot = Box::into_raw(Box::new(SqfModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be NUL-terminated; `out_model` valid.
#[no_mangle]
pub unsafe extern "C" fn sqf_model_load(path: *const c_char, out_model: *mut *mut SqfModel) -> SqfStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let p = text(path, "path")?;
        let inner = FusionModel::load(Path::new(p), None).map_err(model_failure)?;
        *slot = Box::into_raw(Box::new(SqfModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sqf_model_save(model: *const SqfModel, path: *const c_char) -> SqfStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SqfStatus::NullPointer, "model is null".into()))?;
        m.inner.save(Path::new(text(path, "path")?)).map_err(model_failure)
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sqf_model_free(model: *mut SqfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected input channels (sequences × slices) and distinct scalar
/// parameters.
///
/// # Safety
/// `model` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn sqf_model_info(
    model: *const SqfModel,
    out_in_channels: *mut usize,
    out_param_count: *mut usize,
) -> SqfStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SqfStatus::NullPointer, "model is null".into()))?;
        if let Some(c) = out_in_channels.as_mut() {
            *c = m.inner.config().in_channels();
        }
        if let Some(p) = out_param_count.as_mut() {
            *p = m.inner.param_count();
        }
        Ok(())
    })
}

/// Foreground probabilities for a batch `(n, c, h, w)` written to `output`
/// as `(n, h, w)`.
///
/// # Safety
/// `input` must hold `n·c·h·w` values and `output` `n·h·w`.
#[no_mangle]
pub unsafe extern "C" fn sqf_model_predict(
    model: *const SqfModel,
    input: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    output: *mut f64,
) -> SqfStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SqfStatus::NullPointer, "model is null".into()))?;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return fail(SqfStatus::InvalidArgument, "dimensions must be positive");
        }
        let x = slice(input, n * c * h * w, "input")?;
        let y = slice_mut(output, n * h * w, "output")?;
        let p = m
            .inner
            .predict(&Tensor::from_vec(&[n, c, h, w], x.to_vec()))
            .map_err(model_failure)?;
        y.copy_from_slice(p.data());
        Ok(())
    })
}

/// Number of canonical sequences; names via [`sqf_canonical_sequence`].
#[no_mangle]
pub extern "C" fn sqf_canonical_sequence_count() -> usize {
    canonical_sequences().len()
}

/// Name of canonical sequence `i`, or null when out of range. Static.
#[no_mangle]
pub extern "C" fn sqf_canonical_sequence(i: usize) -> *const c_char {
    const NAMES: [&str; 4] = ["CUBE-pre\0", "BRAVO-post\0", "CUBE-post\0", "FLAIR\0"];
    NAMES.get(i).map_or(std::ptr::null(), |s| s.as_ptr().cast())
}
