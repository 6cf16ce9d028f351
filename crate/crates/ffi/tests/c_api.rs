use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use stella_ffi::*;

const TOY: &str = r#"
seq_len = 16
pred_len = 4
channels = 2
[patch]
patch_len = 4
stride = 4
[backbone]
d_model = 8
heads = 2
d_ff = 16
layers = 1
[anchor]
lora_rank = 2
vocab_size = 512
csp_len = 2
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(stella_last_error()) }.to_string_lossy().into_owned()
}

fn toy_model(seed: u64) -> *mut StellaModel {
    let cfg = CString::new(TOY).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { stella_model_new(cfg.as_ptr(), seed, &mut m) };
    assert_eq!(st, StellaStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn input(batch: usize) -> Vec<f64> {
    (0..batch * 16 * 2).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect()
}

#[test]
fn predict_round_trip_through_checkpoint() {
    let m = toy_model(3);
    let (mut s, mut h, mut c) = (0, 0, 0);
    assert_eq!(unsafe { stella_model_dims(m, &mut s, &mut h, &mut c) }, StellaStatus::Ok);
    assert_eq!((s, h, c), (16, 4, 2));

    let x = input(3);
    let mut y = vec![0.0; 3 * 4 * 2];
    let st = unsafe { stella_model_predict(m, x.as_ptr(), x.len(), 3, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, StellaStatus::Ok, "{}", last_error());
    assert!(y.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { stella_model_save(m, path.as_ptr()) }, StellaStatus::Ok);
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { stella_model_load(path.as_ptr(), &mut m2) }, StellaStatus::Ok, "{}", last_error());
    let mut y2 = vec![0.0; y.len()];
    unsafe { stella_model_predict(m2, x.as_ptr(), x.len(), 3, y2.as_mut_ptr(), y2.len()) };
    assert_eq!(y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    unsafe {
        stella_model_free(m);
        stella_model_free(m2);
    }
}

#[test]
fn error_codes() {
    let m = toy_model(1);
    let x = input(1);
    let mut y = vec![0.0; 8];
    let st = unsafe { stella_model_predict(m, x.as_ptr(), x.len() - 1, 1, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, StellaStatus::ShapeMismatch);
    assert!(last_error().contains("31"), "{}", last_error());
    let st = unsafe { stella_model_predict(m, x.as_ptr(), x.len(), 1, y.as_mut_ptr(), 7) };
    assert_eq!(st, StellaStatus::BufferTooSmall);
    let st = unsafe { stella_model_predict(ptr::null(), x.as_ptr(), x.len(), 1, y.as_mut_ptr(), 8) };
    assert_eq!(st, StellaStatus::NullPointer);

    let bad = CString::new("[backbone]\nwidth = 3\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { stella_model_new(bad.as_ptr(), 0, &mut out) }, StellaStatus::Config);
    assert!(last_error().contains("width"));
    assert!(out.is_null());

    let missing = CString::new("/nonexistent/ck.json").unwrap();
    assert_eq!(unsafe { stella_model_load(missing.as_ptr(), &mut out) }, StellaStatus::Io);
    assert!(last_error().contains("/nonexistent/ck.json"));

    let mut s = 0;
    assert_eq!(unsafe { stella_model_dims(m, &mut s, ptr::null_mut(), &mut s) }, StellaStatus::NullPointer);
    unsafe {
        stella_model_free(m);
        stella_model_free(ptr::null_mut());
    }
}

#[test]
fn describe_series_text() {
    let z: Vec<f64> = (0..96).map(|t| (std::f64::consts::TAU * t as f64 / 12.0).sin()).collect();
    let mut written = 0;
    let st = unsafe { stella_describe_series(z.as_ptr(), z.len(), 1, 3, ptr::null_mut(), 0, &mut written) };
    assert_eq!(st, StellaStatus::BufferTooSmall);
    let mut buf = vec![0 as std::ffi::c_char; written + 1];
    let st = unsafe { stella_describe_series(z.as_ptr(), z.len(), 1, 3, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(st, StellaStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(text.len(), written);
    assert!(text.starts_with("seasonal component ."));
    assert!(text.contains("lag 12 has strong positive autocorrelation"), "{text}");
    assert_eq!(last_error(), "");
    let st = unsafe { stella_describe_series(z.as_ptr(), z.len(), 3, 3, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(st, StellaStatus::InvalidArgument);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(stella_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("stella.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "stella_last_error",
        "stella_version",
        "stella_model_new",
        "stella_model_load",
        "stella_model_save",
        "stella_model_free",
        "stella_model_dims",
        "stella_model_predict",
        "stella_describe_series",
        "typedef struct StellaModel StellaModel",
        "STELLA_STATUS_BUFFER_TOO_SMALL = 8",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ StellaModel *m = 0; StellaStatus s = stella_model_new(0, 1, &m); stella_model_free(m); return s == STELLA_STATUS_OK ? 0 : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg(&src).status() {
        Ok(st) => assert!(st.success(), "header does not compile as C"),
        Err(_) => eprintln!("no C compiler found; skipped compile check"),
    }
}
