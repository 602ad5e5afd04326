//! C interface to the DSM refinement library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! an [`MtdsmStatus`]; the message of the most recent failure on the calling
//! thread is available from [`mtdsm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mtdsm::baseline::{baseline_filter, BaselineParams};
use mtdsm::checkpoint;
use mtdsm::inference::predict_tiled;
use mtdsm::network::Generator;
use mtdsm::raster::{load_raster, rmse, save_raster, HeightMap, RoofClassMap};
use mtdsm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtdsmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Checkpoint = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

/// A height raster in meters.
pub struct MtdsmHeightMap(HeightMap);

/// A loaded generator checkpoint.
pub struct MtdsmModel(Generator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> MtdsmStatus {
    match e {
        Error::FileNotFound(_) | Error::Io { .. } => MtdsmStatus::Io,
        Error::Format(_) | Error::ExpectedSingleBand(_) | Error::MissingMetadata(_) | Error::InvalidLabel { .. } => {
            MtdsmStatus::Format
        }
        Error::ShapeMismatch { .. } | Error::GsdMismatch(..) => MtdsmStatus::ShapeMismatch,
        Error::Checkpoint(_) | Error::Json(_) => MtdsmStatus::Checkpoint,
        _ => MtdsmStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MtdsmFailure>) -> MtdsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtdsmStatus::Ok,
        Ok(Err(MtdsmFailure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MtdsmStatus::NullPointer
        }
        Ok(Err(MtdsmFailure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            MtdsmStatus::Internal
        }
    }
}

enum MtdsmFailure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for MtdsmFailure {
    fn from(e: Error) -> Self {
        MtdsmFailure::Lib(e)
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, MtdsmFailure> {
    p.as_ref().ok_or(MtdsmFailure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, MtdsmFailure> {
    if p.is_null() {
        return Err(MtdsmFailure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| MtdsmFailure::Lib(Error::InvalidArgument("path is not valid UTF-8".into())))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), MtdsmFailure> {
    if out.is_null() {
        return Err(MtdsmFailure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mtdsm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a map from `rows * cols` row-major heights.
///
/// # Safety
/// `values` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_heightmap_new(
    rows: usize,
    cols: usize,
    gsd: f64,
    values: *const f64,
    out: *mut *mut MtdsmHeightMap,
) -> MtdsmStatus {
    guard(|| {
        let values = get(values, "values")?;
        let n = rows.checked_mul(cols).ok_or(Error::InvalidArgument("raster too large".into()))?;
        let data = std::slice::from_raw_parts(values, n).to_vec();
        put(out, MtdsmHeightMap(HeightMap::new(rows, cols, gsd, data)?))
    })
}

/// Reads a single-band raster file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_heightmap_load(path: *const c_char, out: *mut *mut MtdsmHeightMap) -> MtdsmStatus {
    guard(|| {
        let path = path_arg(path)?;
        put(out, MtdsmHeightMap(load_raster(path)?))
    })
}

/// Writes a map as GeoTIFF (`.tif`) or raw with a sidecar header.
///
/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_heightmap_save(map: *const MtdsmHeightMap, path: *const c_char) -> MtdsmStatus {
    guard(|| {
        let map = get(map, "map")?;
        save_raster(&map.0, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_heightmap_shape(
    map: *const MtdsmHeightMap,
    rows: *mut usize,
    cols: *mut usize,
) -> MtdsmStatus {
    guard(|| {
        let map = get(map, "map")?;
        if rows.is_null() || cols.is_null() {
            return Err(MtdsmFailure::Null("rows/cols"));
        }
        (*rows, *cols) = map.0.shape();
        Ok(())
    })
}

/// Copies the heights into `buf`, which must hold exactly `rows * cols`
/// values.
///
/// # Safety
/// `map` must be a live handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_heightmap_values(map: *const MtdsmHeightMap, buf: *mut f64, len: usize) -> MtdsmStatus {
    guard(|| {
        let map = get(map, "map")?;
        if buf.is_null() {
            return Err(MtdsmFailure::Null("buf"));
        }
        let values = map.0.values();
        if len != values.len() {
            return Err(Error::InvalidArgument(format!("buffer holds {len} values, map has {}", values.len())).into());
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(values);
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_heightmap_free(map: *mut MtdsmHeightMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Root mean squared difference in meters over cells valid in both maps.
///
/// # Safety
/// Both maps must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_rmse(
    pred: *const MtdsmHeightMap,
    target: *const MtdsmHeightMap,
    out: *mut f64,
) -> MtdsmStatus {
    guard(|| {
        let (p, t) = (get(pred, "pred")?, get(target, "target")?);
        if out.is_null() {
            return Err(MtdsmFailure::Null("out"));
        }
        *out = rmse(&p.0, &t.0)?;
        Ok(())
    })
}

/// Runs the geometric vegetation filter.
///
/// # Safety
/// `input` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_baseline_filter(
    input: *const MtdsmHeightMap,
    variance_window: usize,
    variance_threshold: f64,
    open_radius: usize,
    close_radius: usize,
    fill_window: usize,
    out: *mut *mut MtdsmHeightMap,
) -> MtdsmStatus {
    guard(|| {
        let input = get(input, "input")?;
        let params = BaselineParams { variance_window, variance_threshold, open_radius, close_radius, fill_window };
        put(out, MtdsmHeightMap(baseline_filter(&input.0, &params)?))
    })
}

/// Loads a generator checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_model_load(path: *const c_char, out: *mut *mut MtdsmModel) -> MtdsmStatus {
    guard(|| {
        let ck = checkpoint::load(path_arg(path)?)?;
        put(out, MtdsmModel(ck.generator))
    })
}

/// Predicts a whole map tile by tile. When `roof` is non-null and the model
/// has a segmentation head, the per-pixel roof labels are written there;
/// `roof_len` must then equal `rows * cols`.
///
/// # Safety
/// `model` and `input` must be live handles; `out` must be writable; `roof`
/// must be null or point to `roof_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_model_predict(
    model: *const MtdsmModel,
    input: *const MtdsmHeightMap,
    tile: usize,
    stride: usize,
    out: *mut *mut MtdsmHeightMap,
    roof: *mut u8,
    roof_len: usize,
) -> MtdsmStatus {
    guard(|| {
        let (model, input) = (get(model, "model")?, get(input, "input")?);
        if out.is_null() {
            return Err(MtdsmFailure::Null("out"));
        }
        let pred = predict_tiled(&model.0, &input.0, tile, stride, 1)?;
        if !roof.is_null() {
            let labels: &RoofClassMap = pred
                .roof
                .as_ref()
                .ok_or(Error::InvalidArgument("model has no segmentation head".into()))?;
            if roof_len != labels.labels().len() {
                return Err(Error::InvalidArgument(format!("roof buffer holds {roof_len} labels")).into());
            }
            std::slice::from_raw_parts_mut(roof, roof_len).copy_from_slice(labels.labels());
        }
        put(out, MtdsmHeightMap(pred.dsm))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtdsm_model_free(model: *mut MtdsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
