//! C ABI over the fsdet detector.
//!
//! Handles are opaque pointers created by `*_load` functions and released
//! with the matching `*_free`. Every fallible function returns an
//! [`FsdetStatus`]; on failure [`fsdet_last_error`] holds a message for the
//! calling thread until its next failing call. Strings returned through
//! `char **` out-parameters are owned by the caller and released with
//! [`fsdet_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fsdet::datasets::{load_dataset, make_split, AnnotatedImage, Dataset};
use fsdet::detector::{evaluate, Checkpoint, DetectOptions, Phase};
use fsdet::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsdetStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Protocol = 5,
    Io = 6,
    Checkpoint = 7,
    Parse = 8,
    Panic = 9,
}

/// Which phase a loaded checkpoint finished.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsdetPhase {
    Base = 0,
    Finetuned = 1,
}

/// One detection in image pixel coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FsdetDetection {
    /// Index into the detector's class list, see [`fsdet_detector_class_name`].
    pub class_index: u32,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Detection settings; [`fsdet_detect_options_default`] fills the defaults.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FsdetDetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: u32,
}

/// A loaded checkpoint.
pub struct FsdetDetector {
    checkpoint: Checkpoint,
    classes: Vec<String>,
    class_names: Vec<CString>,
}

/// A dataset directory loaded into memory.
pub struct FsdetDataset {
    dataset: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FsdetStatus {
    match e {
        Error::Config(_) | Error::UnknownSplit { .. } => FsdetStatus::Config,
        Error::Protocol(_) | Error::InsufficientInstances { .. } => FsdetStatus::Protocol,
        Error::Io { .. } => FsdetStatus::Io,
        Error::Checkpoint(_) => FsdetStatus::Checkpoint,
        Error::Parse { .. } | Error::Json(_) | Error::Image(_) => FsdetStatus::Parse,
        _ => FsdetStatus::InvalidArgument,
    }
}

struct Fail(FsdetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FsdetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsdetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            FsdetStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(FsdetStatus::NullArgument, format!("{name} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FsdetStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(FsdetStatus::InvalidArgument, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fsdet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the calling thread's last failure, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fsdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fsdet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn fsdet_detect_options_default() -> FsdetDetectOptions {
    let d = DetectOptions::default();
    FsdetDetectOptions {
        score_threshold: d.score_threshold,
        nms_threshold: d.nms_threshold,
        max_detections: d.max_detections as u32,
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsdet_detector_load(path: *const c_char, out: *mut *mut FsdetDetector) -> FsdetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let checkpoint = Checkpoint::load(&path)?;
        let layout = &checkpoint.detector.layout;
        let classes: Vec<String> = layout.base_classes.iter().chain(&layout.bound).cloned().collect();
        let class_names = classes
            .iter()
            .map(|c| CString::new(c.as_str()).map_err(|_| Fail(FsdetStatus::Checkpoint, "class name contains NUL".into())))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(FsdetDetector {
            checkpoint,
            classes,
            class_names,
        }));
        Ok(())
    })
}

/// Releases a detector. NULL is ignored.
///
/// # Safety
/// `det` must come from [`fsdet_detector_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fsdet_detector_free(det: *mut FsdetDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Number of classes the detector can report.
///
/// # Safety
/// `det` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn fsdet_detector_num_classes(det: *const FsdetDetector) -> u32 {
    det.as_ref().map_or(0, |d| d.classes.len() as u32)
}

/// Name of class `index`, owned by the handle; NULL when out of range.
///
/// # Safety
/// `det` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fsdet_detector_class_name(det: *const FsdetDetector, index: u32) -> *const c_char {
    det.as_ref()
        .and_then(|d| d.class_names.get(index as usize))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Phase the checkpoint finished.
///
/// # Safety
/// `det` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsdet_detector_phase(det: *const FsdetDetector, out: *mut FsdetPhase) -> FsdetStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("det"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match d.checkpoint.phase {
            Phase::Base => FsdetPhase::Base,
            Phase::Finetuned => FsdetPhase::Finetuned,
        };
        Ok(())
    })
}

/// Expected input size in pixels.
///
/// # Safety
/// `det` must be a live handle; `width` and `height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsdet_detector_input_size(det: *const FsdetDetector, width: *mut u32, height: *mut u32) -> FsdetStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("det"))?;
        let (h, w) = d.checkpoint.detector.config.image_size;
        *width.as_mut().ok_or_else(|| null("width"))? = w as u32;
        *height.as_mut().ok_or_else(|| null("height"))? = h as u32;
        Ok(())
    })
}

/// Runs the detector on a packed RGB8 image of `width * height * 3` bytes.
/// Up to `capacity` detections, best first, are written to `out`;
/// `out_count` receives the total found, which may exceed `capacity`.
/// `options` may be NULL for the defaults.
///
/// # Safety
/// `rgb` must point to `width * height * 3` readable bytes, `out` to
/// `capacity` writable elements (or be NULL when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn fsdet_detect(
    det: *const FsdetDetector,
    rgb: *const u8,
    width: u32,
    height: u32,
    options: *const FsdetDetectOptions,
    out: *mut FsdetDetection,
    capacity: usize,
    out_count: *mut usize,
) -> FsdetStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("det"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() && capacity > 0 {
            return Err(null("out"));
        }
        let count = out_count.as_mut().ok_or_else(|| null("out_count"))?;
        let (w, h) = (width as usize, height as usize);
        let expected = d.checkpoint.detector.config.image_size;
        if (h, w) != expected {
            return Err(Fail(
                FsdetStatus::InvalidArgument,
                format!("image is {w}x{h}, detector expects {}x{}", expected.1, expected.0),
            ));
        }
        let pixels = std::slice::from_raw_parts(rgb, w * h * 3).to_vec();
        let image = AnnotatedImage {
            id: "ffi".into(),
            width: w,
            height: h,
            pixels,
            annotations: Vec::new(),
        };
        let opts = match options.as_ref() {
            Some(o) => DetectOptions {
                score_threshold: o.score_threshold,
                nms_threshold: o.nms_threshold,
                max_detections: o.max_detections as usize,
                classes: None,
            },
            None => DetectOptions::default(),
        };
        let dets = d.checkpoint.detector.detect(&image.to_tensor(), &opts)?;
        *count = dets.len();
        for (i, x) in dets.iter().take(capacity).enumerate() {
            let class_index = d.classes.iter().position(|c| *c == x.class).expect("detections use known classes");
            *out.add(i) = FsdetDetection {
                class_index: class_index as u32,
                score: x.score,
                x1: x.bbox.x1,
                y1: x.bbox.y1,
                x2: x.bbox.x2,
                y2: x.bbox.y2,
            };
        }
        Ok(())
    })
}

/// Loads a dataset directory written by `fsdet gen-data`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsdet_dataset_load(path: *const c_char, out: *mut *mut FsdetDataset) -> FsdetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dataset = load_dataset(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FsdetDataset { dataset }));
        Ok(())
    })
}

/// Releases a dataset. NULL is ignored.
///
/// # Safety
/// `ds` must come from [`fsdet_dataset_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fsdet_dataset_free(ds: *mut FsdetDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of images in the dataset.
///
/// # Safety
/// `ds` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn fsdet_dataset_len(ds: *const FsdetDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.dataset.images.len())
}

/// Evaluates the detector on a dataset and returns the report as JSON.
/// `shots` of 0 records no K in the report.
///
/// # Safety
/// Handles must be live, `split` NUL-terminated and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn fsdet_evaluate(
    det: *const FsdetDetector,
    ds: *const FsdetDataset,
    split: *const c_char,
    shots: u32,
    seed: u64,
    out_json: *mut *mut c_char,
) -> FsdetStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("det"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        *out_json = ptr::null_mut();
        let split = make_split(&ds.dataset.classes, str_arg(split, "split")?)?;
        let shots = (shots > 0).then_some(shots as usize);
        let report = evaluate(&d.checkpoint, &ds.dataset, &split, shots, seed, &DetectOptions::default())?;
        out_string(out_json, report.to_json()?)
    })
}
