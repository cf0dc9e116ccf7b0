use std::ffi::{CStr, CString};
use std::ptr;

use kgs_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(kgs_last_error()) }.to_string_lossy().into_owned()
}

fn small_dataset() -> *mut KgsDataset {
    let name = CString::new("single").unwrap();
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { kgs_dataset_generate(name.as_ptr(), 3, &mut data) }, KgsStatus::Ok);
    assert!(!data.is_null());
    data
}

#[test]
fn dataset_lifecycle_and_shape() {
    let data = small_dataset();
    let (mut frames, mut w, mut h) = (0usize, 0u32, 0u32);
    assert_eq!(unsafe { kgs_dataset_shape(data, &mut frames, &mut w, &mut h) }, KgsStatus::Ok);
    assert_eq!((frames, w, h), (8, 64, 64));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kgs_dataset_write(data, path.as_ptr()) }, KgsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { kgs_dataset_read(path.as_ptr(), &mut back) }, KgsStatus::Ok);
    unsafe {
        kgs_dataset_free(back);
        kgs_dataset_free(data);
        kgs_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { kgs_dataset_generate(ptr::null(), 0, &mut data) }, KgsStatus::InvalidArgument);
    assert!(last_error().contains("null"));

    let bogus = CString::new("nope").unwrap();
    assert_eq!(unsafe { kgs_dataset_generate(bogus.as_ptr(), 0, &mut data) }, KgsStatus::Config);
    assert!(last_error().contains("nope"));

    let missing = CString::new("/nonexistent/kgs/dataset").unwrap();
    assert_eq!(unsafe { kgs_dataset_read(missing.as_ptr(), &mut data) }, KgsStatus::Io);
    assert!(last_error().contains("/nonexistent/kgs/dataset"));
    assert!(data.is_null());

    let d = small_dataset();
    let mut model = ptr::null_mut();
    let cfg = CString::new(r#"{"loss.lambda_typo": 1}"#).unwrap();
    assert_eq!(unsafe { kgs_model_new(d, cfg.as_ptr(), &mut model) }, KgsStatus::Config);
    assert!(last_error().contains("lambda_typo"));
    unsafe { kgs_dataset_free(d) };
}

#[test]
fn train_render_save_load() {
    let data = small_dataset();
    let cfg = CString::new(r#"{"train.iterations": 6, "field.width": 8, "field.feature_dim": 2}"#).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { kgs_model_new(data, cfg.as_ptr(), &mut model) }, KgsStatus::Ok, "{}", last_error());

    let mut loss = 0.0;
    assert_eq!(unsafe { kgs_model_train(model, data, 100, &mut loss) }, KgsStatus::Ok, "{}", last_error());
    assert!(loss.is_finite() && loss >= 0.0);
    let (mut it, mut n, mut dy) = (0u64, 0usize, 0usize);
    assert_eq!(unsafe { kgs_model_stats(model, &mut it, &mut n, &mut dy) }, KgsStatus::Ok);
    assert_eq!(it, 6);
    assert!(n >= 1 && dy <= n);

    let mut rgb = vec![0.0; 64 * 64 * 3];
    assert_eq!(unsafe { kgs_model_render(model, data, 1, rgb.as_mut_ptr(), rgb.len()) }, KgsStatus::Ok);
    assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(unsafe { kgs_model_render(model, data, 1, rgb.as_mut_ptr(), 5) }, KgsStatus::Config);
    assert_eq!(unsafe { kgs_model_render(model, data, 99, rgb.as_mut_ptr(), rgb.len()) }, KgsStatus::Config);

    let (mut p, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { kgs_model_evaluate(model, data, &mut p, &mut s) }, KgsStatus::Ok);
    assert!(p > 0.0 && s <= 1.0);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.kgs").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kgs_model_save(model, path.as_ptr()) }, KgsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { kgs_model_load(path.as_ptr(), &mut back) }, KgsStatus::Ok);
    let mut rgb2 = vec![0.0; rgb.len()];
    assert_eq!(unsafe { kgs_model_render(back, data, 1, rgb.as_mut_ptr(), rgb.len()) }, KgsStatus::Ok);
    assert_eq!(unsafe { kgs_model_render(model, data, 1, rgb2.as_mut_ptr(), rgb2.len()) }, KgsStatus::Ok);
    assert_eq!(rgb, rgb2);

    unsafe {
        kgs_model_free(back);
        kgs_model_free(model);
        kgs_dataset_free(data);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(kgs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kgs.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "kgs_last_error",
        "kgs_dataset_generate",
        "kgs_model_train",
        "kgs_model_render",
        "typedef struct KgsModel KgsModel",
        "KGS_STATUS_NUMERICAL = 4",
    ] {
        assert!(text.contains(sym), "missing {sym}");
    }
    // Syntax-check the header with the system C compiler when one exists.
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
