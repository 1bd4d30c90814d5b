use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use msvar_ffi::*;

fn last_error() -> String {
    let p = msvar_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn phantom(kind: MsvarPhantomKind, size: usize, sigma: f64) -> (*mut MsvarImage, *mut MsvarLabels) {
    let (mut image, mut gt) = (ptr::null_mut(), ptr::null_mut());
    let s = unsafe { msvar_phantom(kind, size, sigma, 3, &mut image, &mut gt) };
    assert_eq!(s, MsvarStatus::Ok);
    (image, gt)
}

fn labels_of(result: *const MsvarResult) -> *mut MsvarLabels {
    let mut mask = ptr::null_mut();
    assert_eq!(unsafe { msvar_result_labels(result, &mut mask) }, MsvarStatus::Ok);
    mask
}

fn read_vec(f: impl Fn(*mut f64, usize, *mut usize) -> MsvarStatus) -> Vec<f64> {
    let mut n = 0;
    assert_eq!(f(ptr::null_mut(), 0, &mut n), MsvarStatus::Ok);
    let mut v = vec![0.0; n];
    assert_eq!(f(v.as_mut_ptr(), n, ptr::null_mut()), MsvarStatus::Ok);
    v
}

#[test]
fn ms_round_trip() {
    let (image, gt) = phantom(MsvarPhantomKind::TwoPhase, 32, 0.05);
    let mut params = msvar_ms_params_default();
    params.seed = 4;
    let mut result = ptr::null_mut();
    assert_eq!(unsafe { msvar_segment_ms(image, &params, &mut result) }, MsvarStatus::Ok);

    let trace = read_vec(|o, c, n| unsafe { msvar_result_trace(result, o, c, n) });
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    let mut iterations = 0;
    let mut converged = true;
    assert_eq!(unsafe { msvar_result_info(result, &mut iterations, &mut converged) }, MsvarStatus::Ok);
    assert_eq!(trace.len(), iterations + 1);
    assert_eq!(read_vec(|o, c, n| unsafe { msvar_result_centroids(result, o, c, n) }).len(), 2);

    let mask = labels_of(result);
    let mut m = std::mem::MaybeUninit::<MsvarMetrics>::uninit();
    assert_eq!(unsafe { msvar_eval(mask, gt, -1, m.as_mut_ptr()) }, MsvarStatus::Ok);
    let m = unsafe { m.assume_init() };
    assert!(m.iou.is_nan());
    assert!(m.rc > 0.99 && m.pri > 0.99, "{m:?}");

    // no bias on a plain run
    assert_eq!(unsafe { msvar_result_bias(result, ptr::null_mut(), 0, ptr::null_mut()) }, MsvarStatus::InvalidInput);
    unsafe {
        msvar_labels_free(mask);
        msvar_result_free(result);
        msvar_labels_free(gt);
        msvar_image_free(image);
    }
}

#[test]
fn bias_and_levelset_results() {
    let (image, gt) = phantom(MsvarPhantomKind::RampBias, 32, 0.02);
    let mut params = msvar_ms_params_default();
    params.init = MsvarInit::Kmeans;
    let mut result = ptr::null_mut();
    assert_eq!(unsafe { msvar_segment_ms_bias(image, &params, 0.1, &mut result) }, MsvarStatus::Ok);
    let b = read_vec(|o, c, n| unsafe { msvar_result_bias(result, o, c, n) });
    assert_eq!(b.len(), 32 * 32);
    assert!((b.iter().sum::<f64>() / b.len() as f64 - 1.0).abs() < 1e-9);
    unsafe { msvar_result_free(result) };

    let mut lp = msvar_levelset_params_default();
    lp.max_iters = 20;
    let mut result = ptr::null_mut();
    let s = unsafe { msvar_segment_levelset(image, 1, &lp, &mut result) };
    assert_eq!(s, MsvarStatus::NotConverged);
    assert!(last_error().contains("20"));
    assert!(!result.is_null());
    let mut converged = true;
    unsafe { msvar_result_info(result, ptr::null_mut(), &mut converged) };
    assert!(!converged);
    unsafe {
        msvar_result_free(result);
        msvar_labels_free(gt);
        msvar_image_free(image);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut image = ptr::null_mut();
    let data = [0.1, 0.2, f64::NAN, 0.4];
    assert_eq!(unsafe { msvar_image_new(2, 2, 1, data.as_ptr(), &mut image) }, MsvarStatus::InvalidInput);
    assert!(image.is_null());
    assert!(!last_error().is_empty());

    let data = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(unsafe { msvar_image_new(2, 2, 1, data.as_ptr(), &mut image) }, MsvarStatus::Ok);
    let (mut h, mut w, mut c) = (0, 0, 0);
    assert_eq!(unsafe { msvar_image_shape(image, &mut h, &mut w, &mut c) }, MsvarStatus::Ok);
    assert_eq!((h, w, c), (2, 2, 1));

    let mut params = msvar_ms_params_default();
    params.lambda = -1.0;
    let mut result = ptr::null_mut();
    assert_eq!(unsafe { msvar_segment_ms(image, &params, &mut result) }, MsvarStatus::InvalidParam);
    assert!(result.is_null());
    assert_eq!(unsafe { msvar_segment_ms(ptr::null(), ptr::null(), &mut result) }, MsvarStatus::NullPointer);
    unsafe { msvar_image_free(image) };

    let missing = CString::new("/nonexistent/x.pgm").unwrap();
    assert_eq!(unsafe { msvar_image_read(missing.as_ptr(), &mut image) }, MsvarStatus::Io);

    let raw = [0u8, 1, 1, 0];
    let mut labels = ptr::null_mut();
    assert_eq!(unsafe { msvar_labels_new(2, 2, raw.as_ptr(), &mut labels) }, MsvarStatus::Ok);
    let mut small = [0u8; 2];
    let mut n = 0;
    let s = unsafe { msvar_labels_data(labels, small.as_mut_ptr(), small.len(), &mut n) };
    assert_eq!((s, n), (MsvarStatus::BufferTooSmall, 4));
    let mut m = std::mem::MaybeUninit::<MsvarMetrics>::uninit();
    assert_eq!(unsafe { msvar_eval(labels, labels, 300, m.as_mut_ptr()) }, MsvarStatus::InvalidParam);
    assert_eq!(unsafe { msvar_eval(labels, labels, 1, m.as_mut_ptr()) }, MsvarStatus::Ok);
    assert_eq!(unsafe { m.assume_init() }.iou, 1.0);
    unsafe {
        msvar_labels_free(labels);
        msvar_labels_free(ptr::null_mut());
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(msvar_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn artifact_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = artifact_dir().join("libmsvar_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let exe = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("msvar_smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rc "));
}
