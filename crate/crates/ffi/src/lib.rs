//! C ABI over `msvar`.
//!
//! Every fallible call returns an [`MsvarStatus`]. On failure the message is
//! available from [`msvar_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use msvar::bias::minimize_ms_bias;
use msvar::levelset::{segment_levelset, LevelSetParams};
use msvar::metrics::MetricsRow;
use msvar::phantom::{make_phantom, PhantomKind};
use msvar::softseg::{hard_mask, minimize_ms};
use msvar::{Centroids, Error, Image, Init, LabelMap, MsConfig, ScalarField, SolveError, Traced};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsvarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParam = 2,
    InvalidInput = 3,
    Io = 4,
    /// The solver stopped early. The result handle is still filled in.
    NotConverged = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsvarPhantomKind {
    TwoPhase = 0,
    FourPhase = 1,
    RampBias = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsvarInit {
    Random = 0,
    Kmeans = 1,
}

/// Settings of the softmax solvers (with and without bias).
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MsvarMsParams {
    pub lambda: f64,
    pub num_classes: usize,
    pub step_size: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub tv_eps: f64,
    pub seed: u64,
    pub line_search: bool,
    pub init: MsvarInit,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MsvarLevelSetParams {
    pub lambda: f64,
    pub dt: f64,
    pub eps_h: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub tv_eps: f64,
    pub seed: u64,
}

/// Overlap fields are NaN when no positive class was requested.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MsvarMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub rc: f64,
    pub pri: f64,
    pub vi: f64,
}

pub struct MsvarImage(Image);

pub struct MsvarLabels(LabelMap);

pub struct MsvarResult {
    labels: LabelMap,
    centroids: Centroids,
    trace: Vec<f64>,
    bias: Option<ScalarField>,
    iterations: usize,
    converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: MsvarStatus, msg: impl Into<String>) -> MsvarStatus {
    set_error(msg);
    status
}

fn from_error(e: &Error) -> MsvarStatus {
    let status = match e {
        Error::Param(_) => MsvarStatus::InvalidParam,
        Error::Input(_) | Error::Format(_) => MsvarStatus::InvalidInput,
        Error::Io(_) | Error::Json(_) => MsvarStatus::Io,
        Error::Convergence { .. } => MsvarStatus::NotConverged,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `MsvarStatus::Panic`.
fn guard(f: impl FnOnce() -> MsvarStatus) -> MsvarStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MsvarStatus::Panic, msg)
        }
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(&e),
        }
    };
}

macro_rules! deref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(MsvarStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

fn put<T>(out: *mut *mut T, value: T) -> MsvarStatus {
    if out.is_null() {
        return fail(MsvarStatus::NullPointer, "output pointer is null");
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    MsvarStatus::Ok
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, MsvarStatus> {
    if path.is_null() {
        return Err(fail(MsvarStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path).to_str().map_err(|_| fail(MsvarStatus::InvalidInput, "path is not UTF-8"))
}

/// Copies `src` into `out[..cap]`. `len_out` always receives the full length.
fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize, len_out: *mut usize) -> MsvarStatus {
    if !len_out.is_null() {
        unsafe { *len_out = src.len() };
    }
    if out.is_null() {
        return MsvarStatus::Ok;
    }
    if cap < src.len() {
        return fail(MsvarStatus::BufferTooSmall, format!("buffer holds {cap}, need {}", src.len()));
    }
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    MsvarStatus::Ok
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn msvar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn msvar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn msvar_ms_params_default() -> MsvarMsParams {
    let c = MsConfig::default();
    MsvarMsParams {
        lambda: c.lambda,
        num_classes: c.num_classes,
        step_size: c.step_size,
        max_iters: c.max_iters,
        rel_tol: c.rel_tol,
        tv_eps: c.tv_eps,
        seed: c.seed,
        line_search: c.line_search,
        init: MsvarInit::Random,
    }
}

#[no_mangle]
pub extern "C" fn msvar_levelset_params_default() -> MsvarLevelSetParams {
    let p = LevelSetParams::default();
    MsvarLevelSetParams {
        lambda: p.lambda,
        dt: p.dt,
        eps_h: p.eps_h,
        max_iters: p.max_iters,
        patience: p.patience,
        tv_eps: p.tv_eps,
        seed: p.seed,
    }
}

/// Copies `height * width * channels` pixel-interleaved values into a new image.
///
/// # Safety
/// `data` must point to that many readable doubles.
#[no_mangle]
pub unsafe extern "C" fn msvar_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut MsvarImage,
) -> MsvarStatus {
    guard(|| {
        if data.is_null() {
            return fail(MsvarStatus::NullPointer, "data is null");
        }
        let Some(n) = height.checked_mul(width).and_then(|n| n.checked_mul(channels)) else {
            return fail(MsvarStatus::InvalidInput, "image size overflows");
        };
        let values = std::slice::from_raw_parts(data, n).to_vec();
        put(out, MsvarImage(tri!(Image::new(height, width, channels, values))))
    })
}

/// Reads a PGM or PPM file, scaled to [0, 1].
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn msvar_image_read(path: *const c_char, out: *mut *mut MsvarImage) -> MsvarStatus {
    guard(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        put(out, MsvarImage(tri!(msvar::io::read_image(path))))
    })
}

/// # Safety
/// `image` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msvar_image_free(image: *mut MsvarImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// # Safety
/// `image` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn msvar_image_shape(
    image: *const MsvarImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> MsvarStatus {
    let image = &deref!(image).0;
    for (dst, v) in [(height, image.height()), (width, image.width()), (channels, image.channels())] {
        if !dst.is_null() {
            *dst = v;
        }
    }
    MsvarStatus::Ok
}

/// # Safety
/// `labels` must point to `height * width` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn msvar_labels_new(
    height: usize,
    width: usize,
    labels: *const u8,
    out: *mut *mut MsvarLabels,
) -> MsvarStatus {
    guard(|| {
        if labels.is_null() {
            return fail(MsvarStatus::NullPointer, "labels is null");
        }
        let Some(n) = height.checked_mul(width) else {
            return fail(MsvarStatus::InvalidInput, "label map size overflows");
        };
        let values = std::slice::from_raw_parts(labels, n).to_vec();
        put(out, MsvarLabels(tri!(LabelMap::new(height, width, values))))
    })
}

/// Reads an 8-bit PGM whose gray values are class indices.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn msvar_labels_read(path: *const c_char, out: *mut *mut MsvarLabels) -> MsvarStatus {
    guard(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        put(out, MsvarLabels(tri!(msvar::io::read_labels(path))))
    })
}

/// # Safety
/// `labels` must be a live handle. See [`msvar_result_trace`] for the
/// buffer protocol.
#[no_mangle]
pub unsafe extern "C" fn msvar_labels_data(
    labels: *const MsvarLabels,
    out: *mut u8,
    cap: usize,
    len_out: *mut usize,
) -> MsvarStatus {
    copy_out(deref!(labels).0.as_slice(), out, cap, len_out)
}

/// # Safety
/// `labels` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msvar_labels_free(labels: *mut MsvarLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Synthetic phantom of side `size`. `gt_out` may be null.
///
/// # Safety
/// Out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn msvar_phantom(
    kind: MsvarPhantomKind,
    size: usize,
    sigma: f64,
    seed: u64,
    image_out: *mut *mut MsvarImage,
    gt_out: *mut *mut MsvarLabels,
) -> MsvarStatus {
    guard(|| {
        let kind = match kind {
            MsvarPhantomKind::TwoPhase => PhantomKind::TwoPhase,
            MsvarPhantomKind::FourPhase => PhantomKind::FourPhase,
            MsvarPhantomKind::RampBias => PhantomKind::RampBias,
        };
        if image_out.is_null() {
            return fail(MsvarStatus::NullPointer, "image_out is null");
        }
        let p = tri!(make_phantom(kind, size, sigma, seed));
        if !gt_out.is_null() {
            put(gt_out, MsvarLabels(p.labels));
        }
        put(image_out, MsvarImage(p.image))
    })
}

fn ms_config(p: &MsvarMsParams) -> (MsConfig, Init) {
    let cfg = MsConfig {
        lambda: p.lambda,
        num_classes: p.num_classes,
        step_size: p.step_size,
        max_iters: p.max_iters,
        rel_tol: p.rel_tol,
        tv_eps: p.tv_eps,
        seed: p.seed,
        line_search: p.line_search,
    };
    let init = match p.init {
        MsvarInit::Random => Init::Random,
        MsvarInit::Kmeans => Init::Kmeans,
    };
    (cfg, init)
}

fn finish<T: std::fmt::Debug + Traced>(
    r: Result<T, SolveError<T>>,
    out: *mut *mut MsvarResult,
    convert: impl FnOnce(T) -> MsvarResult,
) -> MsvarStatus {
    match r {
        Ok(run) => put(out, convert(run)),
        Err(SolveError::NotConverged { reason, partial }) => {
            let status = put(out, convert(*partial));
            if status != MsvarStatus::Ok {
                return status;
            }
            fail(MsvarStatus::NotConverged, reason)
        }
        Err(SolveError::Invalid(e)) => from_error(&e),
    }
}

/// Softmax-relaxed segmentation. `params` may be null for defaults.
///
/// # Safety
/// `image` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvar_segment_ms(
    image: *const MsvarImage,
    params: *const MsvarMsParams,
    out: *mut *mut MsvarResult,
) -> MsvarStatus {
    guard(|| {
        let image = &deref!(image).0;
        let p = params.as_ref().copied().unwrap_or_else(|| msvar_ms_params_default());
        let (cfg, init) = ms_config(&p);
        finish(minimize_ms(image, &cfg, init), out, |run| MsvarResult {
            labels: hard_mask(&run.seg),
            trace: run.objective_trace(),
            centroids: run.centroids,
            bias: None,
            iterations: run.iterations,
            converged: run.termination.converged(),
        })
    })
}

/// Segmentation with a multiplicative bias field of TV weight `gamma`.
///
/// # Safety
/// `image` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvar_segment_ms_bias(
    image: *const MsvarImage,
    params: *const MsvarMsParams,
    gamma: f64,
    out: *mut *mut MsvarResult,
) -> MsvarStatus {
    guard(|| {
        let image = &deref!(image).0;
        let p = params.as_ref().copied().unwrap_or_else(|| msvar_ms_params_default());
        let (cfg, init) = ms_config(&p);
        finish(minimize_ms_bias(image, &cfg, gamma, init), out, |run| MsvarResult {
            labels: hard_mask(&run.seg),
            trace: run.objective_trace(),
            centroids: run.centroids,
            bias: Some(run.bias.field),
            iterations: run.iterations,
            converged: run.termination.converged(),
        })
    })
}

/// Multiphase level set with `phases` level functions (1 or 2).
///
/// # Safety
/// `image` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvar_segment_levelset(
    image: *const MsvarImage,
    phases: usize,
    params: *const MsvarLevelSetParams,
    out: *mut *mut MsvarResult,
) -> MsvarStatus {
    guard(|| {
        let image = &deref!(image).0;
        let p = params.as_ref().copied().unwrap_or_else(|| msvar_levelset_params_default());
        let params = LevelSetParams {
            lambda: p.lambda,
            dt: p.dt,
            eps_h: p.eps_h,
            max_iters: p.max_iters,
            patience: p.patience,
            tv_eps: p.tv_eps,
            seed: p.seed,
        };
        finish(segment_levelset(image, phases, &params), out, |run| MsvarResult {
            trace: run.objective_trace(),
            labels: run.labels,
            centroids: run.centroids,
            bias: None,
            iterations: run.iterations,
            converged: run.termination.converged(),
        })
    })
}

/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvar_result_labels(result: *const MsvarResult, out: *mut *mut MsvarLabels) -> MsvarStatus {
    put(out, MsvarLabels(deref!(result).labels.clone()))
}

/// Objective trace: initial value followed by one entry per accepted step.
///
/// Pass a null `out` to query the length through `len_out`. Otherwise `cap`
/// is the buffer capacity in elements.
///
/// # Safety
/// `result` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn msvar_result_trace(
    result: *const MsvarResult,
    out: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> MsvarStatus {
    copy_out(&deref!(result).trace, out, cap, len_out)
}

/// Class centroids, row-major `num_classes x channels`.
///
/// # Safety
/// As for [`msvar_result_trace`].
#[no_mangle]
pub unsafe extern "C" fn msvar_result_centroids(
    result: *const MsvarResult,
    out: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> MsvarStatus {
    let flat: Vec<f64> = deref!(result).centroids.rows().concat();
    copy_out(&flat, out, cap, len_out)
}

/// Estimated bias field (row-major), only for `msvar_segment_ms_bias` results.
///
/// # Safety
/// As for [`msvar_result_trace`].
#[no_mangle]
pub unsafe extern "C" fn msvar_result_bias(
    result: *const MsvarResult,
    out: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> MsvarStatus {
    match &deref!(result).bias {
        Some(b) => copy_out(b.as_slice(), out, cap, len_out),
        None => fail(MsvarStatus::InvalidInput, "result has no bias field"),
    }
}

/// # Safety
/// `result` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn msvar_result_info(
    result: *const MsvarResult,
    iterations: *mut usize,
    converged: *mut bool,
) -> MsvarStatus {
    let r = deref!(result);
    if !iterations.is_null() {
        *iterations = r.iterations;
    }
    if !converged.is_null() {
        *converged = r.converged;
    }
    MsvarStatus::Ok
}

/// # Safety
/// `result` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msvar_result_free(result: *mut MsvarResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Metrics of `pred` against `gt`. A negative `positive_class` skips the
/// overlap metrics.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvar_eval(
    pred: *const MsvarLabels,
    gt: *const MsvarLabels,
    positive_class: i32,
    out: *mut MsvarMetrics,
) -> MsvarStatus {
    guard(|| {
        let (pred, gt) = (&deref!(pred).0, &deref!(gt).0);
        if out.is_null() {
            return fail(MsvarStatus::NullPointer, "out is null");
        }
        let positive = match positive_class {
            c if c < 0 => None,
            c => match u8::try_from(c) {
                Ok(c) => Some(c),
                Err(_) => return fail(MsvarStatus::InvalidParam, format!("positive class {c} is not a label")),
            },
        };
        let row = tri!(MetricsRow::evaluate(String::new(), String::new(), pred, gt, positive));
        let o = row.overlap;
        *out = MsvarMetrics {
            iou: o.map_or(f64::NAN, |o| o.iou),
            dice: o.map_or(f64::NAN, |o| o.dice),
            precision: o.map_or(f64::NAN, |o| o.precision),
            recall: o.map_or(f64::NAN, |o| o.recall),
            rc: row.clustering.rc,
            pri: row.clustering.pri,
            vi: row.clustering.vi,
        };
        MsvarStatus::Ok
    })
}
