//! C ABI over the `sqil` library.
//!
//! Every fallible function returns a [`SqilStatus`]; on failure the message is
//! available from [`sqil_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sqil::io::{self, Checkpoint};
use sqil::nn::Policy;
use sqil::qkernels::{self, QuantizedModel};
use sqil::{Category, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqilStatus {
    Ok = 0,
    ErrUsage = 1,
    ErrNumeric = 2,
    ErrIo = 3,
    /// A Rust panic was caught at the boundary.
    ErrInternal = 4,
}

/// A policy loaded from a checkpoint (full precision or fake-quantized).
pub struct SqilPolicy {
    inner: Checkpoint,
}

/// An exported integer model.
pub struct SqilQModel {
    inner: QuantizedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SqilStatus {
    match e.category() {
        Category::Usage => SqilStatus::ErrUsage,
        Category::Numeric => SqilStatus::ErrNumeric,
        Category::Io => SqilStatus::ErrIo,
    }
}

fn guard<F: FnOnce() -> sqil::Result<()>>(f: F) -> SqilStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SqilStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SqilStatus::ErrInternal
        }
    }
}

fn null(what: &str) -> Error {
    Error::usage(format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> sqil::Result<&'a str> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::usage("path is not valid UTF-8"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> sqil::Result<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> sqil::Result<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> sqil::Result<()> {
    if src.len() != dst.len() {
        return Err(Error::usage(format!("output buffer holds {}, need {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn sqil_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn sqil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sqil_policy_load(path: *const c_char, out: *mut *mut SqilPolicy) -> SqilStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = io::load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SqilPolicy { inner }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`sqil_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sqil_policy_free(p: *mut SqilPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Observation length, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqil_policy_input_dim(p: *const SqilPolicy) -> usize {
    p.as_ref().map_or(0, |p| p.inner.input_dim())
}

/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqil_policy_output_dim(p: *const SqilPolicy) -> usize {
    p.as_ref().map_or(0, |p| p.inner.output_dim())
}

/// Returns 1 when the checkpoint holds a fake-quantized policy.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqil_policy_is_quantized(p: *const SqilPolicy) -> i32 {
    p.as_ref().map_or(0, |p| matches!(p.inner, Checkpoint::Quant(_)) as i32)
}

/// Writes the action mean for `obs` into `out` (`out_len` must equal the
/// output dimension).
///
/// # Safety
/// Buffers must hold at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn sqil_policy_act(
    p: *const SqilPolicy,
    obs: *const f64,
    obs_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SqilStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("policy"))?;
        let a = p.inner.act(slice(obs, obs_len, "obs")?)?;
        copy_out(&a, slice_mut(out, out_len, "out")?)
    })
}

/// Loads an exported integer model into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_load(path: *const c_char, out: *mut *mut SqilQModel) -> SqilStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = io::load_qmodel(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SqilQModel { inner }));
        Ok(())
    })
}

/// Exports the integer form of a fake-quantized policy handle.
///
/// # Safety
/// `p` must be a live policy handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_from_policy(p: *const SqilPolicy, out: *mut *mut SqilQModel) -> SqilStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = p.as_ref().ok_or_else(|| null("policy"))?;
        let Checkpoint::Quant(q) = &p.inner else {
            return Err(Error::usage("policy is not quantized"));
        };
        let inner = QuantizedModel::from_fake_quant(q)?;
        *out = Box::into_raw(Box::new(SqilQModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_free(m: *mut SqilQModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_input_dim(m: *const SqilQModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_output_dim(m: *const SqilQModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// Bytes of packed weight codes, excluding scales and biases.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_weight_bytes(m: *const SqilQModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.weight_bytes())
}

/// Integer forward pass of an exported model.
///
/// # Safety
/// Buffers must hold at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn sqil_qmodel_act(
    m: *const SqilQModel,
    obs: *const f64,
    obs_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SqilStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let a = m.inner.forward(slice(obs, obs_len, "obs")?)?;
        copy_out(&a, slice_mut(out, out_len, "out")?)
    })
}

/// Symmetric `bits`-bit codes of `x` at scale `gamma`.
///
/// # Safety
/// `x` and `out` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn sqil_quantize(x: *const f64, n: usize, gamma: f64, bits: u32, out: *mut i32) -> SqilStatus {
    guard(|| {
        let x = slice(x, n, "x")?;
        let out = slice_mut(out, n, "out")?;
        for (o, v) in out.iter_mut().zip(x) {
            *o = sqil::quant::quantize(*v, gamma, bits)?;
        }
        Ok(())
    })
}

/// `codes * gamma`.
///
/// # Safety
/// `codes` and `out` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn sqil_dequantize(codes: *const i32, n: usize, gamma: f64, out: *mut f64) -> SqilStatus {
    guard(|| {
        if !gamma.is_finite() {
            return Err(Error::usage("scale must be finite"));
        }
        let codes = slice(codes, n, "codes")?;
        let out = slice_mut(out, n, "out")?;
        for (o, c) in out.iter_mut().zip(codes) {
            *o = sqil::quant::dequantize(*c, gamma);
        }
        Ok(())
    })
}

/// Row-major `C (m x n) = A (m x k) * B (k x n)` with i32 accumulation.
///
/// # Safety
/// Buffers must hold `m*k`, `k*n` and `m*n` elements.
#[no_mangle]
pub unsafe extern "C" fn sqil_gemm_i8i8_i32(
    a: *const i8,
    b: *const i8,
    m: usize,
    k: usize,
    n: usize,
    c: *mut i32,
) -> SqilStatus {
    guard(|| {
        let mk = m.checked_mul(k).ok_or_else(|| Error::usage("shape overflow"))?;
        let kn = k.checked_mul(n).ok_or_else(|| Error::usage("shape overflow"))?;
        let mn = m.checked_mul(n).ok_or_else(|| Error::usage("shape overflow"))?;
        let r = qkernels::gemm_i8i8_i32(slice(a, mk, "a")?, slice(b, kn, "b")?, m, k, n)?;
        slice_mut(c, mn, "c")?.copy_from_slice(&r);
        Ok(())
    })
}
