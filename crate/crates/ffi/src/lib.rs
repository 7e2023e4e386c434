//! C interface to the completion sampler and metrics.
//!
//! Objects are passed as opaque handles created by `vf_*_new`/`vf_*_load`
//! functions and released with the matching `vf_*_free`. Every fallible call
//! returns a `VfStatus`; on failure `vf_last_error` describes the most recent
//! error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use voxfill::genmodel::{Backbone, Condition};
use voxfill::geometry::io::{read_cloud, write_cloud};
use voxfill::geometry::PointCloud;
use voxfill::metrics;
use voxfill::sampler::{run_method, Frame, Method, SamplerConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    Sampler = 5,
    Metric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfMethod {
    Full = 0,
    Baseline = 1,
    WoErs = 2,
    WoPns = 3,
    WoIas = 4,
    Ias10 = 5,
}

impl From<VfMethod> for Method {
    fn from(m: VfMethod) -> Self {
        match m {
            VfMethod::Full => Method::Full,
            VfMethod::Baseline => Method::Baseline,
            VfMethod::WoErs => Method::WoErs,
            VfMethod::WoPns => Method::WoPns,
            VfMethod::WoIas => Method::WoIas,
            VfMethod::Ias10 => Method::Ias10,
        }
    }
}

/// Sampler settings. Obtain defaults from `vf_sampler_config_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct VfSamplerConfig {
    pub steps: u32,
    pub seed: u64,
    pub eta: f64,
    pub method: VfMethod,
    /// Family label, or a negative value for unconditional sampling.
    pub label: i32,
    pub guidance: f64,
    /// Nonzero: deterministic-noise mode.
    pub zero_noise: u8,
    /// Nonzero: voxelize the partial as given instead of fitting it to the unit cube.
    pub canonical_frame: u8,
}

/// Loaded backbone checkpoint.
pub struct VfModel(Backbone);

/// Point cloud.
pub struct VfCloud(PointCloud);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("no interior NUL")));
}

fn guard(f: impl FnOnce() -> Result<(), (VfStatus, String)>) -> VfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VfStatus::Panic
        }
    }
}

fn null(name: &str) -> (VfStatus, String) {
    (VfStatus::NullPointer, format!("{name} is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (VfStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (VfStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn emit<T>(out: *mut *mut T, value: T) {
    // SAFETY: callers check `out` for null before computing `value`.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message for the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn vf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn vf_sampler_config_default() -> VfSamplerConfig {
    let d = SamplerConfig::default();
    VfSamplerConfig {
        steps: d.steps as u32,
        seed: d.seed,
        eta: d.eta,
        method: VfMethod::Full,
        label: -1,
        guidance: Condition::DEFAULT_GUIDANCE,
        zero_noise: 0,
        canonical_frame: 0,
    }
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(dir: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir, "dir")?;
        let (model, _) = Backbone::load(&dir).map_err(|e| (VfStatus::Model, e.to_string()))?;
        emit(out, VfModel(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `vf_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Grid resolution of the loaded model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_resolution(model: *const VfModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.grid_res)
}

/// Copies `n` points from `xyz` (`3 * n` doubles, interleaved).
///
/// # Safety
/// `xyz` must point to `3 * n` readable doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_new(xyz: *const f64, n: usize, out: *mut *mut VfCloud) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if xyz.is_null() {
            return Err(null("xyz"));
        }
        let flat = std::slice::from_raw_parts(xyz, 3 * n);
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let pc = PointCloud::new(points).map_err(|e| (VfStatus::InvalidArgument, e.to_string()))?;
        emit(out, VfCloud(pc));
        Ok(())
    })
}

/// Reads a PLY, OBJ or XYZ file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_read(path: *const c_char, out: *mut *mut VfCloud) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let pc = read_cloud(&path).map_err(|e| (VfStatus::Io, e.to_string()))?;
        emit(out, VfCloud(pc));
        Ok(())
    })
}

/// # Safety
/// `cloud` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_write(cloud: *const VfCloud, path: *const c_char) -> VfStatus {
    guard(|| {
        let cloud = cloud.as_ref().ok_or_else(|| null("cloud"))?;
        let path = path_arg(path, "path")?;
        write_cloud(&path, &cloud.0).map_err(|e| (VfStatus::Io, e.to_string()))
    })
}

/// # Safety
/// `cloud` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_len(cloud: *const VfCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies up to `capacity` points into `xyz` and returns how many were written.
///
/// # Safety
/// `xyz` must have room for `3 * capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_copy(cloud: *const VfCloud, xyz: *mut f64, capacity: usize) -> usize {
    let (Some(cloud), false) = (cloud.as_ref(), xyz.is_null()) else {
        return 0;
    };
    let n = cloud.0.len().min(capacity);
    let dst = std::slice::from_raw_parts_mut(xyz, 3 * n);
    for (d, p) in dst.chunks_exact_mut(3).zip(cloud.0.points()) {
        d.copy_from_slice(p);
    }
    n
}

/// # Safety
/// `cloud` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_free(cloud: *mut VfCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Completes `partial`; the result is a new cloud owned by the caller.
///
/// # Safety
/// All pointers must be valid; `cfg` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn vf_complete(
    model: *const VfModel,
    partial: *const VfCloud,
    cfg: *const VfSamplerConfig,
    out: *mut *mut VfCloud,
) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let partial = partial.as_ref().ok_or_else(|| null("partial"))?;
        let c = cfg.as_ref().copied().unwrap_or_else(|| vf_sampler_config_default());
        let condition = if c.label < 0 {
            Condition::unconditional()
        } else {
            Condition::label(c.label as usize).with_guidance(c.guidance)
        };
        let sc = SamplerConfig {
            steps: c.steps as usize,
            seed: c.seed,
            eta: c.eta,
            condition,
            zero_noise: c.zero_noise != 0,
            frame: if c.canonical_frame != 0 { Frame::Canonical } else { Frame::Fit },
            ..SamplerConfig::default()
        };
        let done = run_method(c.method.into(), &partial.0, &model.0, &sc).map_err(|e| (VfStatus::Sampler, e.to_string()))?;
        emit(out, VfCloud(done.points));
        Ok(())
    })
}

unsafe fn metric(
    a: *const VfCloud,
    b: *const VfCloud,
    out: *mut f64,
    f: fn(&PointCloud, &PointCloud) -> Result<f64, metrics::MetricError>,
) -> VfStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = f(&a.0, &b.0).map_err(|e| (VfStatus::Metric, e.to_string()))?;
        Ok(())
    })
}

/// Symmetric chamfer distance with the default subsample size.
///
/// # Safety
/// `a`, `b` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vf_chamfer(a: *const VfCloud, b: *const VfCloud, out: *mut f64) -> VfStatus {
    metric(a, b, out, |a, b| metrics::chamfer(a, b, Some(metrics::CHAMFER_SAMPLES)))
}

/// Earth mover's distance with the default subsample size.
///
/// # Safety
/// `a`, `b` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vf_emd(a: *const VfCloud, b: *const VfCloud, out: *mut f64) -> VfStatus {
    metric(a, b, out, |a, b| metrics::emd(a, b, Some(metrics::EMD_SAMPLES)))
}
