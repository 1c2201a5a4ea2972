//! C interface to the resattnet models.
//!
//! Models and volumes are opaque handles created and freed through this
//! API. Every function returns a `VnetStatus`; on failure the message is
//! available from `vnet_last_error` on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use resattnet::checkpoint::{self, CheckpointManifest};
use resattnet::data::{normalize, read_volume, RawVolume};
use resattnet::gradcam::compute_gradcam;
use resattnet::layers::{softmax, Mode};
use resattnet::{ArchitectureSpec, DType, Element, Error, Model, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    CheckpointMismatch = 6,
    UnknownLayer = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Opaque model handle.
pub struct VnetModel {
    inner: AnyModel,
}

/// Opaque single-channel volume handle, (D, H, W).
pub struct VnetVolume {
    data: Tensor<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VnetStatus {
    match e {
        Error::Io { .. } | Error::ManifestNotFound(_) => VnetStatus::Io,
        Error::Format { .. } => VnetStatus::Format,
        Error::ShapeMismatch { .. }
        | Error::DimensionMismatch { .. }
        | Error::OutputUnderflow { .. }
        | Error::StageUnderflow { .. } => VnetStatus::Shape,
        Error::CheckpointMismatch(_) => VnetStatus::CheckpointMismatch,
        Error::UnknownLayer { .. } => VnetStatus::UnknownLayer,
        _ => VnetStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Buffer { needed: usize, given: usize },
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VnetStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            VnetStatus::NullPointer
        }
        Ok(Err(Failure::Buffer { needed, given })) => {
            set_error(format!("output buffer holds {given} values, {needed} needed"));
            VnetStatus::BufferTooSmall
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            VnetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    if len < needed {
        return Err(Failure::Buffer { needed, given: len });
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next API call on the same thread.
#[no_mangle]
pub extern "C" fn vnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a freshly initialized model from a preset name for inputs of
/// `depth × height × width` voxels. `use_f64` selects double precision.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vnet_model_build(
    name: *const c_char,
    width_mult: f64,
    depth: usize,
    height: usize,
    width: usize,
    seed: u64,
    use_f64: bool,
    out: *mut *mut VnetModel,
) -> VnetStatus {
    guard(|| {
        let spec = ArchitectureSpec::preset(str_arg(name, "name")?, width_mult)?;
        let dims = [depth, height, width];
        let inner = if use_f64 {
            AnyModel::F64(Model::build(&spec, dims, seed)?)
        } else {
            AnyModel::F32(Model::build(&spec, dims, seed)?)
        };
        put(out, VnetModel { inner })
    })
}

/// Loads a checkpoint in its stored precision.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vnet_model_load(path: *const c_char, out: *mut *mut VnetModel) -> VnetStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let header: CheckpointManifest = checkpoint::peek(path)?;
        let inner = match header.dtype {
            DType::F32 => AnyModel::F32(checkpoint::load(path)?),
            DType::F64 => AnyModel::F64(checkpoint::load(path)?),
        };
        put(out, VnetModel { inner })
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vnet_model_save(model: *const VnetModel, path: *const c_char) -> VnetStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = Path::new(str_arg(path, "path")?);
        match &m.inner {
            AnyModel::F32(m) => checkpoint::save(m, path)?,
            AnyModel::F64(m) => checkpoint::save(m, path)?,
        }
        Ok(())
    })
}

/// Frees a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vnet_model_free(model: *mut VnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vnet_model_param_count(model: *const VnetModel, out: *mut usize) -> VnetStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = match &m.inner {
            AnyModel::F32(m) => m.param_count(),
            AnyModel::F64(m) => m.param_count(),
        };
        Ok(())
    })
}

/// Writes the model's expected input dims (D, H, W) to `dims`.
///
/// # Safety
/// `model` must come from this library; `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn vnet_model_input_dims(model: *const VnetModel, dims: *mut usize) -> VnetStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let d = match &m.inner {
            AnyModel::F32(m) => m.input_spatial(),
            AnyModel::F64(m) => m.input_spatial(),
        };
        out_slice(dims, 3, 3, "dims")?.copy_from_slice(&d);
        Ok(())
    })
}

/// Reads a NIfTI-1 or VRAW volume and normalizes it to zero mean and unit
/// variance.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vnet_volume_read(path: *const c_char, out: *mut *mut VnetVolume) -> VnetStatus {
    guard(|| {
        let rec = read_volume(Path::new(str_arg(path, "path")?), "ffi", 0)?;
        put(out, VnetVolume { data: rec.volume })
    })
}

/// Copies `depth × height × width` floats (W fastest) into a new volume,
/// normalizing them when `normalized` is true.
///
/// # Safety
/// `data` must point to `depth * height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vnet_volume_from_data(
    data: *const f32,
    depth: usize,
    height: usize,
    width: usize,
    normalized: bool,
    out: *mut *mut VnetVolume,
) -> VnetStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n = depth
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("bad volume dims {depth}x{height}x{width}")))?;
        let src = std::slice::from_raw_parts(data, n);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()).into());
        }
        let vals = if normalized { normalize(src) } else { src.to_vec() };
        let raw = RawVolume::new([depth, height, width], vals)?;
        put(out, VnetVolume { data: raw.to_tensor() })
    })
}

/// # Safety
/// `volume` must come from this library; `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn vnet_volume_dims(volume: *const VnetVolume, dims: *mut usize) -> VnetStatus {
    guard(|| {
        let v = ref_arg(volume, "volume")?;
        out_slice(dims, 3, 3, "dims")?.copy_from_slice(&v.data.shape().spatial());
        Ok(())
    })
}

/// Frees a volume. NULL is ignored.
///
/// # Safety
/// `volume` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vnet_volume_free(volume: *mut VnetVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

fn check_dims<T: Element>(m: &Model<T>, v: &Tensor<f32>) -> Result<(), Error> {
    let (want, got) = (m.input_spatial(), v.shape().spatial());
    if want != got {
        return Err(Error::DimensionMismatch {
            op: "ffi input",
            detail: format!("model expects {want:?}, volume is {got:?}"),
        });
    }
    Ok(())
}

fn probabilities<T: Element>(m: &Model<T>, v: &Tensor<f32>) -> Result<Vec<f64>, Error> {
    check_dims(m, v)?;
    let logits = m.forward(&v.cast::<T>(), Mode::Eval)?;
    Ok(softmax(&logits).to_f64_vec())
}

/// Eval-mode class probabilities for one volume, whose dims must match the
/// model's input dims. `probs` receives `num_classes` values.
///
/// # Safety
/// Handles must come from this library; `probs` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vnet_predict(
    model: *const VnetModel,
    volume: *const VnetVolume,
    probs: *mut f64,
    len: usize,
) -> VnetStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let v = ref_arg(volume, "volume")?;
        let p = match &m.inner {
            AnyModel::F32(m) => probabilities(m, &v.data)?,
            AnyModel::F64(m) => probabilities(m, &v.data)?,
        };
        out_slice(probs, len, p.len(), "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

fn heatmap<T: Element>(m: &Model<T>, v: &Tensor<f32>, class: usize, layer: Option<&str>) -> Result<Vec<f32>, Error> {
    check_dims(m, v)?;
    let layer = layer.map(str::to_string).unwrap_or_else(|| m.last_feature_layer());
    let res = compute_gradcam(m, &v.cast::<T>(), class, &layer)?;
    Ok(res.upsampled.data().iter().map(|&x| x as f32).collect())
}

/// Grad-CAM heatmap for `class` at `layer` (NULL = deepest feature map),
/// upsampled to the volume's dims and written to `out` (D·H·W floats).
///
/// # Safety
/// Handles must come from this library; `layer` is NULL or NUL-terminated;
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vnet_gradcam(
    model: *const VnetModel,
    volume: *const VnetVolume,
    class: usize,
    layer: *const c_char,
    out: *mut f32,
    len: usize,
) -> VnetStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let v = ref_arg(volume, "volume")?;
        let layer = if layer.is_null() { None } else { Some(str_arg(layer, "layer")?) };
        let map = match &m.inner {
            AnyModel::F32(m) => heatmap(m, &v.data, class, layer)?,
            AnyModel::F64(m) => heatmap(m, &v.data, class, layer)?,
        };
        out_slice(out, len, map.len(), "out")?.copy_from_slice(&map);
        Ok(())
    })
}
