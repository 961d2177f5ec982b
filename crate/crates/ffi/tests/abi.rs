use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fsdet::datasets::{generate_synthetic, make_split, save_dataset, DatasetSpec};
use fsdet::detector::{train_base, DetectorConfig};
use fsdet_ffi::*;

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut spec = DatasetSpec {
        images: 4,
        image_size: 64,
        object_size: [10.0, 24.0],
        ..DatasetSpec::default()
    };
    let split = make_split(&spec.class_names(), "synthetic").unwrap();
    spec.allowed_classes = Some(split.base.clone());
    let data = generate_synthetic(&spec, 1).unwrap();
    let mut cfg = DetectorConfig::micro();
    cfg.base.epochs = 1;
    let ckpt = train_base(&data, &split, cfg, 0, |_, _| Ok(())).unwrap();
    let (ck, ds) = (dir.join("c.fsd"), dir.join("data"));
    ckpt.save(&ck).unwrap();
    save_dataset(&data, &ds).unwrap();
    (ck, ds)
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fsdet_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn load_detect_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let (ck, ds) = fixture(tmp.path());
    unsafe {
        let mut det = ptr::null_mut();
        assert_eq!(fsdet_detector_load(c(&ck).as_ptr(), &mut det), FsdetStatus::Ok);
        assert_eq!(fsdet_detector_num_classes(det), 6);
        assert!(fsdet_detector_class_name(det, 6).is_null());
        assert!(!fsdet_detector_class_name(det, 0).is_null());
        let mut phase = FsdetPhase::Finetuned;
        assert_eq!(fsdet_detector_phase(det, &mut phase), FsdetStatus::Ok);
        assert_eq!(phase, FsdetPhase::Base);
        let (mut w, mut h) = (0, 0);
        assert_eq!(fsdet_detector_input_size(det, &mut w, &mut h), FsdetStatus::Ok);
        assert_eq!((w, h), (64, 64));

        let rgb = vec![128u8; 64 * 64 * 3];
        let mut opts = fsdet_detect_options_default();
        opts.score_threshold = 0.0;
        let mut out = [FsdetDetection::default(); 4];
        let mut n = 0usize;
        let s = fsdet_detect(det, rgb.as_ptr(), 64, 64, &opts, out.as_mut_ptr(), out.len(), &mut n);
        assert_eq!(s, FsdetStatus::Ok);
        for d in out.iter().take(n.min(4)) {
            assert!(d.class_index < 6 && d.x1 <= d.x2 && d.y1 <= d.y2);
        }
        let mut count_only = 0usize;
        let s = fsdet_detect(det, rgb.as_ptr(), 64, 64, &opts, ptr::null_mut(), 0, &mut count_only);
        assert_eq!(s, FsdetStatus::Ok);
        assert_eq!(count_only, n);

        let s = fsdet_detect(det, rgb.as_ptr(), 32, 32, ptr::null(), ptr::null_mut(), 0, &mut n);
        assert_eq!(s, FsdetStatus::InvalidArgument);
        assert!(last_error().contains("expects 64x64"), "{}", last_error());

        let mut data = ptr::null_mut();
        assert_eq!(fsdet_dataset_load(c(&ds).as_ptr(), &mut data), FsdetStatus::Ok);
        assert_eq!(fsdet_dataset_len(data), 4);
        let mut json = ptr::null_mut();
        let split = CString::new("synthetic").unwrap();
        assert_eq!(fsdet_evaluate(det, data, split.as_ptr(), 0, 0, &mut json), FsdetStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["split"], "synthetic");
        fsdet_string_free(json);

        let bad = CString::new("dior-9").unwrap();
        assert_eq!(fsdet_evaluate(det, data, bad.as_ptr(), 0, 0, &mut json), FsdetStatus::Config);
        assert!(json.is_null());

        fsdet_dataset_free(data);
        fsdet_detector_free(det);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut det = ptr::null_mut();
        assert_eq!(fsdet_detector_load(ptr::null(), &mut det), FsdetStatus::NullArgument);
        assert!(det.is_null());
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/c.fsd").unwrap();
        assert_eq!(fsdet_detector_load(missing.as_ptr(), &mut det), FsdetStatus::Io);
        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(fsdet_detector_load(bad_utf8.as_ptr().cast(), &mut det), FsdetStatus::InvalidUtf8);
        let mut n = 0;
        assert_eq!(
            fsdet_detect(ptr::null(), ptr::null(), 0, 0, ptr::null(), ptr::null_mut(), 0, &mut n),
            FsdetStatus::NullArgument
        );
        fsdet_detector_free(ptr::null_mut());
        fsdet_dataset_free(ptr::null_mut());
        fsdet_string_free(ptr::null_mut());
        assert_eq!(fsdet_detector_num_classes(ptr::null()), 0);
        assert!(CStr::from_ptr(fsdet_version()).to_str().unwrap().starts_with("0."));
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (ck, _) = fixture(tmp.path());
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 1;
    std::fs::write(&ck, bytes).unwrap();
    unsafe {
        let mut det = ptr::null_mut();
        assert_eq!(fsdet_detector_load(c(&ck).as_ptr(), &mut det), FsdetStatus::Checkpoint);
        assert!(last_error().contains("checksum"));
    }
}

/// Compiles `tests/smoke.c` against the generated header and the shared
/// library, then runs it on a fixture checkpoint.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let libdir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !libdir.join("libfsdet_ffi.so").exists() && !libdir.join("libfsdet_ffi.dylib").exists() {
        eprintln!("shared library not found in {}; skipping", libdir.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let (ck, _) = fixture(tmp.path());
    let exe = tmp.path().join("smoke");
    let status = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&libdir)
        .arg("-lfsdet_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe)
        .arg(&ck)
        .env("LD_LIBRARY_PATH", &libdir)
        .env("DYLD_LIBRARY_PATH", &libdir)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("classes 6"), "{stdout}");
}
