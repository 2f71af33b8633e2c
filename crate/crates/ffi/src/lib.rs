//! C ABI over sedkit.
//!
//! Every fallible function returns a [`SedkitStatus`]; on failure the message
//! is available from [`sedkit_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Output buffers
//! are caller-owned.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sedkit::checkpoint::{load_encoder, load_flow};
use sedkit::encoder::{EncoderModel, Embedding, PoolingSpec};
use sedkit::evalsts::{cosine, pearson, spearman};
use sedkit::flow::{flow_score, CouplingFlow};
use sedkit::objectives::{ensemble_mean_embedding, sed_loss, EnsembleSpec};
use sedkit::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SedkitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ChecksumMismatch = 4,
    UnsupportedVersion = 5,
    ShapeMismatch = 6,
    UndefinedCorrelation = 7,
    BufferTooSmall = 8,
    Internal = 99,
}

/// Encoder loaded from a checkpoint.
pub struct SedkitEncoder {
    model: EncoderModel,
}

/// Coupling flow loaded from a checkpoint.
pub struct SedkitFlow {
    flow: CouplingFlow,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SedkitStatus {
    match e.root() {
        Error::Io(_) | Error::Data { .. } => SedkitStatus::Io,
        Error::CheckpointChecksum | Error::CheckpointCorrupt(_) => SedkitStatus::ChecksumMismatch,
        Error::CheckpointVersion { .. } => SedkitStatus::UnsupportedVersion,
        Error::Shape(_) | Error::ArchitectureMismatch { .. } => SedkitStatus::ShapeMismatch,
        Error::UndefinedCorrelation(_) => SedkitStatus::UndefinedCorrelation,
        _ => SedkitStatus::InvalidArgument,
    }
}

struct Fail(SedkitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> SedkitStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SedkitStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SedkitStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SedkitStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SedkitStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < values.len() {
        return Err(Fail(
            SedkitStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {} needed", values.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn write_scalar(value: f64, out: *mut f64) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output"));
    }
    *out = value;
    Ok(())
}

fn pool_arg(k: u32) -> Result<PoolingSpec, Fail> {
    Ok(PoolingSpec::new(k as usize)?)
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn sedkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sedkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an encoder checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sedkit_encoder_load(path: *const c_char, out: *mut *mut SedkitEncoder) -> SedkitStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_encoder(Path::new(path))?;
        *out = Box::into_raw(Box::new(SedkitEncoder { model }));
        Ok(())
    })
}

/// Releases an encoder. Null is ignored.
///
/// # Safety
/// `encoder` must come from [`sedkit_encoder_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sedkit_encoder_free(encoder: *mut SedkitEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sedkit_encoder_dim(encoder: *const SedkitEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.model.dim())
}

/// Writes the embedding of `sentence`, mean-pooled over the final `pool_k` layers, into `out`.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_encoder_encode(
    encoder: *const SedkitEncoder,
    sentence: *const c_char,
    pool_k: u32,
    out: *mut f64,
    out_len: usize,
) -> SedkitStatus {
    guard(|| {
        let enc = encoder.as_ref().ok_or_else(|| null("encoder"))?;
        let sentence = str_arg(sentence, "sentence")?;
        let e = enc.model.encode(sentence, pool_arg(pool_k)?)?;
        write_out(e.as_slice(), out, out_len)
    })
}

/// Writes the mean embedding of `count` encoders into `out`.
///
/// # Safety
/// `encoders` must point to `count` live handles and `out` hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_ensemble_mean(
    encoders: *const *const SedkitEncoder,
    count: usize,
    sentence: *const c_char,
    pool_k: u32,
    out: *mut f64,
    out_len: usize,
) -> SedkitStatus {
    guard(|| {
        if encoders.is_null() {
            return Err(null("encoders"));
        }
        let members = std::slice::from_raw_parts(encoders, count)
            .iter()
            .map(|p| p.as_ref().map(|e| e.model.clone()).ok_or_else(|| null("encoder in ensemble")))
            .collect::<Result<Vec<_>, _>>()?;
        let ensemble = EnsembleSpec::new(members, pool_arg(pool_k)?)?;
        let mean = ensemble_mean_embedding(&ensemble, str_arg(sentence, "sentence")?)?;
        write_out(mean.as_slice(), out, out_len)
    })
}

/// Mean squared difference between `target` and `student` over `dim` values.
///
/// # Safety
/// Both inputs must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_sed_loss(
    target: *const f64,
    student: *const f64,
    dim: usize,
    out: *mut f64,
) -> SedkitStatus {
    guard(|| {
        let t = Embedding::new(slice_arg(target, dim, "target")?.to_vec());
        let s = Embedding::new(slice_arg(student, dim, "student")?.to_vec());
        write_scalar(sed_loss(&t, &s)?, out)
    })
}

/// Loads a flow checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sedkit_flow_load(path: *const c_char, out: *mut *mut SedkitFlow) -> SedkitStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let flow = load_flow(Path::new(path))?;
        *out = Box::into_raw(Box::new(SedkitFlow { flow }));
        Ok(())
    })
}

/// Releases a flow. Null is ignored.
///
/// # Safety
/// `flow` must come from [`sedkit_flow_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sedkit_flow_free(flow: *mut SedkitFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// Input width of the flow, or 0 for a null handle.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sedkit_flow_dim(flow: *const SedkitFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.flow.dim())
}

/// Cosine similarity of two embeddings after mapping both through the flow.
///
/// # Safety
/// `a` and `b` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_flow_score(
    flow: *const SedkitFlow,
    a: *const f64,
    b: *const f64,
    dim: usize,
    out: *mut f64,
) -> SedkitStatus {
    guard(|| {
        let f = flow.as_ref().ok_or_else(|| null("flow"))?;
        let a = Embedding::new(slice_arg(a, dim, "a")?.to_vec());
        let b = Embedding::new(slice_arg(b, dim, "b")?.to_vec());
        write_scalar(flow_score(&f.flow, &a, &b)?, out)
    })
}

/// Cosine similarity; a zero vector scores 0.
///
/// # Safety
/// `a` and `b` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_cosine(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> SedkitStatus {
    guard(|| write_scalar(cosine(slice_arg(a, len, "a")?, slice_arg(b, len, "b")?)?, out))
}

/// Pearson correlation of `n` pairs.
///
/// # Safety
/// `xs` and `ys` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_pearson(xs: *const f64, ys: *const f64, n: usize, out: *mut f64) -> SedkitStatus {
    guard(|| write_scalar(pearson(slice_arg(xs, n, "xs")?, slice_arg(ys, n, "ys")?)?, out))
}

/// Spearman correlation of `n` pairs with average ranks for ties.
///
/// # Safety
/// `xs` and `ys` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sedkit_spearman(xs: *const f64, ys: *const f64, n: usize, out: *mut f64) -> SedkitStatus {
    guard(|| write_scalar(spearman(slice_arg(xs, n, "xs")?, slice_arg(ys, n, "ys")?)?, out))
}
