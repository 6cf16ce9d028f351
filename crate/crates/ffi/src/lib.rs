//! C ABI over the forecaster.
//!
//! Models are opaque handles created by `stella_model_new` or
//! `stella_model_load` and released with `stella_model_free`. Every fallible
//! call returns a `StellaStatus`; on failure `stella_last_error` describes
//! the most recent error on the calling thread. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stella::anchor::{extract_signature, render_fbp_text};
use stella::model::{ModelConfig, Stella};
use stella::neural_stl::ComponentKind;
use stella::numerics::Tensor;
use stella::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StellaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Config = 4,
    Io = 5,
    Numeric = 6,
    Data = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct StellaModel {
    inner: Stella,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &Error) -> StellaStatus {
    match e {
        Error::ShapeMismatch { .. } => StellaStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::Parse { .. } => StellaStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => StellaStatus::Config,
        Error::Io { .. } => StellaStatus::Io,
        Error::Data(_) => StellaStatus::Data,
        Error::DivisionByZero(_) | Error::NonFinite(_) | Error::Undefined(_) | Error::Diverged(_) => StellaStatus::Numeric,
    }
}

fn fail(status: StellaStatus, msg: impl Into<String>) -> StellaStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), StellaStatus>) -> StellaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            StellaStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(StellaStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: stella::Result<T>) -> Result<T, StellaStatus> {
    r.map_err(|e| {
        let mut msg = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            msg.push_str(": ");
            msg.push_str(&s.to_string());
            src = s.source();
        }
        fail(status_of(&e), msg)
    })
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, StellaStatus> {
    if p.is_null() {
        return Err(fail(StellaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(StellaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), StellaStatus> {
    if p.is_null() {
        Err(fail(StellaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn model<'a>(m: *const StellaModel) -> Result<&'a StellaModel, StellaStatus> {
    m.as_ref().ok_or_else(|| fail(StellaStatus::NullPointer, "model handle is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stella_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stella_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a freshly initialized model. `config_toml` holds model keys
/// (`seq_len`, `[backbone]`, ...) and may be null for defaults.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stella_model_new(config_toml: *const c_char, seed: u64, out: *mut *mut StellaModel) -> StellaStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg: ModelConfig = if config_toml.is_null() {
            ModelConfig::default()
        } else {
            let text = c_str(config_toml, "config_toml")?;
            toml::from_str(text).map_err(|e| fail(StellaStatus::Config, e.message().to_string()))?
        };
        let inner = lift(Stella::new(cfg, seed))?;
        *out = Box::into_raw(Box::new(StellaModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by the command line tool or `stella_model_save`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stella_model_load(path: *const c_char, out: *mut *mut StellaModel) -> StellaStatus {
    guard(|| {
        check_out(out, "out")?;
        let p = c_str(path, "path")?;
        let inner = lift(Stella::load(Path::new(p)))?;
        *out = Box::into_raw(Box::new(StellaModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stella_model_save(model: *const StellaModel, path: *const c_char) -> StellaStatus {
    guard(|| {
        let m = self::model(model)?;
        let p = c_str(path, "path")?;
        lift(m.inner.save(Path::new(p)))
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stella_model_free(model: *mut StellaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input length, horizon and channel count of a model.
///
/// # Safety
/// `model` is a live handle; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn stella_model_dims(
    model: *const StellaModel,
    seq_len: *mut usize,
    pred_len: *mut usize,
    channels: *mut usize,
) -> StellaStatus {
    guard(|| {
        let m = self::model(model)?;
        check_out(seq_len, "seq_len")?;
        check_out(pred_len, "pred_len")?;
        check_out(channels, "channels")?;
        let c = &m.inner.config;
        *seq_len = c.seq_len;
        *pred_len = c.pred_len;
        *channels = c.channels;
        Ok(())
    })
}

/// Forecasts `batch` windows. `input` is row-major `[batch, seq_len,
/// channels]` and `output` receives `[batch, pred_len, channels]`.
///
/// # Safety
/// `input` holds `input_len` doubles and `output` has room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn stella_model_predict(
    model: *const StellaModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    output: *mut f64,
    output_len: usize,
) -> StellaStatus {
    guard(|| {
        let m = self::model(model)?;
        if input.is_null() {
            return Err(fail(StellaStatus::NullPointer, "input is null"));
        }
        check_out(output, "output")?;
        let c = &m.inner.config;
        let need_in = batch * c.seq_len * c.channels;
        let need_out = batch * c.pred_len * c.channels;
        if batch == 0 || input_len != need_in {
            return Err(fail(
                StellaStatus::ShapeMismatch,
                format!("input has {input_len} values, {batch} windows need {need_in}"),
            ));
        }
        if output_len < need_out {
            return Err(fail(StellaStatus::BufferTooSmall, format!("output holds {output_len} values, {need_out} needed")));
        }
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let x = lift(Tensor::new(&[batch, c.seq_len, c.channels], data))?;
        let y = lift(m.inner.predict(&x))?;
        std::slice::from_raw_parts_mut(output, need_out).copy_from_slice(y.data());
        Ok(())
    })
}

/// Renders the behavioral description of one component series into `buf`.
/// `component` is 0 for trend, 1 for seasonal, 2 for residual. `written`
/// receives the text length without the terminator; when `buf` is too
/// small the call fails with `BufferTooSmall` and `written` still reports
/// the needed length.
///
/// # Safety
/// `series` holds `len` doubles; `buf` has room for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn stella_describe_series(
    series: *const f64,
    len: usize,
    component: u32,
    top_lags: usize,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> StellaStatus {
    guard(|| {
        if series.is_null() {
            return Err(fail(StellaStatus::NullPointer, "series is null"));
        }
        check_out(written, "written")?;
        let kind = match component {
            0 => ComponentKind::Trend,
            1 => ComponentKind::Seasonal,
            2 => ComponentKind::Residual,
            k => return Err(fail(StellaStatus::InvalidArgument, format!("component {k} is not 0, 1 or 2"))),
        };
        let z = std::slice::from_raw_parts(series, len);
        let sig = lift(extract_signature(z, top_lags))?;
        let text = render_fbp_text(&sig, kind);
        *written = text.len();
        if buf.is_null() || buf_len < text.len() + 1 {
            return Err(fail(
                StellaStatus::BufferTooSmall,
                format!("text needs {} bytes, buffer has {buf_len}", text.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}
