//! C ABI over `mcl-core`.
//!
//! Every fallible call returns an [`MclStatus`]. On failure the message is
//! kept per thread and read back with [`mcl_last_error`]. Handles are
//! opaque; free them with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;

use mcl_core::checkpoint::Checkpoint;
use mcl_core::data::{load_path, Dataset};
use mcl_core::imgops::{Factor, Image};
use mcl_core::trainer::{eval_sample_id, evaluate, infer_batch};
use mcl_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MclStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 path.
    InvalidArgument = 1,
    Contract = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// A loaded checkpoint.
pub struct MclModel {
    checkpoint: Checkpoint,
}

/// A labeled dataset held in memory.
pub struct MclDataset {
    dataset: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MclStatus {
    match e {
        Error::Contract { .. } => MclStatus::Contract,
        Error::Config(_) => MclStatus::Config,
        Error::Io(_) => MclStatus::Io,
        Error::Format { .. } => MclStatus::Format,
        Error::Numeric { .. } => MclStatus::Numeric,
    }
}

struct Fail(MclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(MclStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MclStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mcl".into());
            MclStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("null path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const MclModel) -> Result<&'a MclModel, Fail> {
    m.as_ref().ok_or_else(|| invalid("null model"))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint written by `mcl train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_load(path: *const c_char, out: *mut *mut MclModel) -> MclStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = std::ptr::null_mut();
        let checkpoint = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MclModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mcl_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_free(model: *mut MclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_num_classes(model: *const MclModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.network.spec.classes)
}

/// Number of factors (length of the weight vector), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_num_factors(model: *const MclModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.catalog.len())
}

/// Input height, width and channels.
///
/// # Safety
/// `model` must be a live handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_input_shape(
    model: *const MclModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> MclStatus {
    guard(|| {
        let m = model_ref(model)?;
        if height.is_null() || width.is_null() || channels.is_null() {
            return Err(invalid("null output pointer"));
        }
        let s = &m.checkpoint.network.spec;
        *height = s.height;
        *width = s.width;
        *channels = s.channels;
        Ok(())
    })
}

/// Name of factor `index` in the model's catalog, or null when out of range.
/// The string lives as long as the process.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_factor_name(model: *const MclModel, index: usize) -> *const c_char {
    let Some(m) = model.as_ref() else { return std::ptr::null() };
    match m.checkpoint.catalog.get(index) {
        Some(f) => factor_names()[f.index()].as_ptr(),
        None => std::ptr::null(),
    }
}

fn factor_names() -> &'static [CString] {
    static NAMES: OnceLock<Vec<CString>> = OnceLock::new();
    NAMES.get_or_init(|| Factor::ALL.iter().map(|f| CString::new(f.name()).expect("no nul in names")).collect())
}

/// Classify one image given as HWC floats in [0, 1].
///
/// Writes the label to `label`. When `weights` is non-null it receives
/// `weights_len` mapping weights, which must equal [`mcl_model_num_factors`].
/// `causal` forces counterfactual analysis for variants that skip it.
///
/// # Safety
/// `pixels` must point to `len` floats; `label` must be writable; `weights`
/// must be null or point to `weights_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_infer(
    model: *const MclModel,
    pixels: *const f32,
    len: usize,
    causal: bool,
    label: *mut u32,
    weights: *mut f64,
    weights_len: usize,
) -> MclStatus {
    guard(|| {
        let m = model_ref(model)?;
        if pixels.is_null() || label.is_null() {
            return Err(invalid("null pointer argument"));
        }
        let s = &m.checkpoint.network.spec;
        if len != s.height * s.width * s.channels {
            return Err(invalid(&format!("expected {} floats, got {len}", s.height * s.width * s.channels)));
        }
        if !weights.is_null() && weights_len != m.checkpoint.catalog.len() {
            return Err(invalid(&format!("weights buffer holds {weights_len}, model has {} factors", m.checkpoint.catalog.len())));
        }
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let image = Image::new(s.height, s.width, s.channels, data)?;
        let id = eval_sample_id(&m.checkpoint, 0);
        let out = infer_batch(&m.checkpoint, &[&image], &[id], causal)?;
        let inf = &out[0];
        *label = inf.label as u32;
        if !weights.is_null() {
            std::slice::from_raw_parts_mut(weights, weights_len).copy_from_slice(inf.weights.values());
        }
        Ok(())
    })
}

/// Load a dataset: an IDX image file (labels found alongside) or a manifest
/// written by `mcl gen-corrupt`. `limit` of 0 loads everything.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mcl_dataset_load(path: *const c_char, limit: usize, out: *mut *mut MclDataset) -> MclStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = std::ptr::null_mut();
        let dataset = load_path(&path_arg(path)?, (limit > 0).then_some(limit))?;
        *out = Box::into_raw(Box::new(MclDataset { dataset }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`mcl_dataset_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mcl_dataset_free(dataset: *mut MclDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcl_dataset_len(dataset: *const MclDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.len())
}

/// Accuracy in percent and mean cross-entropy of `model` on `dataset`.
/// Either output may be null.
///
/// # Safety
/// Both handles must be live; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcl_model_evaluate(
    model: *const MclModel,
    dataset: *const MclDataset,
    accuracy: *mut f64,
    loss: *mut f64,
) -> MclStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = dataset.as_ref().ok_or_else(|| invalid("null dataset"))?;
        let ds = &d.dataset;
        if let (Some(shape), s) = (ds.image_shape(), &m.checkpoint.network.spec) {
            if shape != (s.height, s.width, s.channels) {
                return Err(Fail(MclStatus::Format, format!("dataset images {shape:?} do not match the model input")));
            }
        }
        let row = evaluate(&m.checkpoint, ds)?;
        if !accuracy.is_null() {
            *accuracy = row.accuracy;
        }
        if !loss.is_null() {
            *loss = row.loss_c;
        }
        Ok(())
    })
}
