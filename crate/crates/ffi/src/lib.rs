//! C ABI over the chela model and kernels.
//!
//! Every function returns a [`ChelaStatus`]; on failure the message is
//! available from [`chela_last_error`] on the same thread. Models are opaque
//! handles created by [`chela_model_create`] or [`chela_model_load`] and
//! released with [`chela_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chela::attention::{linear_attention_chunked, AttentionInputs, AttnNorm};
use chela::conv::causal_conv_fft;
use chela::layer::{ChelaModel as Model, ModelConfig, ModelInput};
use chela::train::{load_checkpoint, save_checkpoint, Checkpoint};
use chela::{ChelaError, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChelaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    LengthExceeded = 4,
    OutOfVocabulary = 5,
    NonFinite = 6,
    /// Bad magic, truncation, manifest or tensor layout errors.
    Checkpoint = 7,
    Io = 8,
    Json = 9,
    /// The output buffer is smaller than the required length.
    BufferTooSmall = 10,
    /// An internal panic was caught.
    Panic = 11,
    Internal = 12,
}

/// Opaque model handle.
pub struct ChelaModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &ChelaError) -> ChelaStatus {
    match e {
        ChelaError::Shape(_) | ChelaError::Empty(_) => ChelaStatus::Shape,
        ChelaError::InvalidArgument(_) | ChelaError::Singular { .. } | ChelaError::BudgetExceeded(_) => {
            ChelaStatus::InvalidArgument
        }
        ChelaError::NonFinite(_) | ChelaError::Diverged { .. } => ChelaStatus::NonFinite,
        ChelaError::LengthExceeded { .. } => ChelaStatus::LengthExceeded,
        ChelaError::OutOfVocabulary { .. } => ChelaStatus::OutOfVocabulary,
        ChelaError::BadMagic
        | ChelaError::Truncated { .. }
        | ChelaError::Manifest(_)
        | ChelaError::OffsetMismatch { .. }
        | ChelaError::TensorShape { .. }
        | ChelaError::NotF32(_) => ChelaStatus::Checkpoint,
        ChelaError::Io { .. } => ChelaStatus::Io,
        ChelaError::Json(_) => ChelaStatus::Json,
        ChelaError::Csv(_) => ChelaStatus::Internal,
    }
}

struct Fail(ChelaStatus, String);

impl From<ChelaError> for Fail {
    fn from(e: ChelaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

/// Runs `f`, records its error and converts panics.
fn guard(f: impl FnOnce() -> FfiResult) -> ChelaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ChelaStatus::Ok
        }
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
            set_error(format!("panic: {msg}"));
            ChelaStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ChelaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ChelaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const ChelaModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|h| &h.inner).ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out(src: &[f64], out: *mut f64, capacity: usize) -> FfiResult {
    if capacity < src.len() {
        return Err(Fail(
            ChelaStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {capacity}", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn output_len(model: &Model, batch: usize, len: usize) -> usize {
    match model.config.task_head {
        chela::layer::TaskHead::Lm => batch * len * model.config.output_dim(),
        _ => batch * model.config.output_dim(),
    }
}

fn into_handle(model: Model, out: *mut *mut ChelaModel) -> FfiResult {
    unsafe { *out = Box::into_raw(Box::new(ChelaModel { inner: model })) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chela_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn chela_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a model from a JSON configuration and initializes it from the
/// configuration's seed.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_model` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn chela_model_create(config_json: *const c_char, out_model: *mut *mut ChelaModel) -> ChelaStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let text = c_str(config_json, "config_json")?;
        let model = Model::new(ModelConfig::from_json(text)?)?;
        into_handle(model, out_model)
    })
}

/// Loads model weights from a checkpoint file. Optimizer state, if any, is
/// ignored.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chela_model_load(path: *const c_char, out_model: *mut *mut ChelaModel) -> ChelaStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let p = PathBuf::from(c_str(path, "path")?);
        into_handle(load_checkpoint(&p)?.model, out_model)
    })
}

/// Writes the model weights as a checkpoint without optimizer state.
///
/// # Safety
/// `model` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn chela_model_save(model: *const ChelaModel, path: *const c_char) -> ChelaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = PathBuf::from(c_str(path, "path")?);
        let ck = Checkpoint {
            model: m.clone(),
            optim: None,
            rng_state: 0,
            step: 0,
        };
        save_checkpoint(&ck, &p)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chela_model_free(model: *mut ChelaModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Number of trainable scalars, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn chela_model_param_count(model: *const ChelaModel) -> usize {
    model.as_ref().map_or(0, |h| h.inner.param_count())
}

/// Number of output values of a forward pass over `batch` sequences of
/// `len` positions: `batch*len*vocab` for language models, `batch*classes`
/// for classifiers, `batch` for regression.
///
/// # Safety
/// `model` must come from this library and `out_len` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chela_model_output_len(
    model: *const ChelaModel,
    batch: usize,
    len: usize,
    out_len: *mut usize,
) -> ChelaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        *out_len = output_len(m, batch, len);
        Ok(())
    })
}

/// Forward pass over token ids laid out `[batch, len]`, row-major. Writes
/// [`chela_model_output_len`] values to `out`.
///
/// # Safety
/// `ids` must hold `batch*len` values and `out` `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn chela_model_forward_tokens(
    model: *const ChelaModel,
    ids: *const u32,
    batch: usize,
    len: usize,
    out: *mut f64,
    out_capacity: usize,
) -> ChelaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = slice(ids, batch * len, "ids")?;
        let input = ModelInput::tokens(ids.iter().map(|&t| t as usize).collect(), batch, len)?;
        let y = m.forward(&input)?;
        write_out(y.data(), out, out_capacity)
    })
}

/// Forward pass over real features laid out `[batch, len, channels]`,
/// row-major.
///
/// # Safety
/// `x` must hold `batch*len*channels` values and `out` `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn chela_model_forward_features(
    model: *const ChelaModel,
    x: *const f64,
    batch: usize,
    len: usize,
    channels: usize,
    out: *mut f64,
    out_capacity: usize,
) -> ChelaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = slice(x, batch * len * channels, "x")?;
        let input = ModelInput::Features(Tensor::from_vec(&[batch, len, channels], x.to_vec())?);
        let y = m.forward(&input)?;
        write_out(y.data(), out, out_capacity)
    })
}

/// Causal linear attention of one sequence in chunks of `chunk` positions,
/// with unit-gain RMS normalization of the output. `q`, `k`, `v` and `out`
/// are `[len, d]`, row-major.
///
/// # Safety
/// Each pointer must hold `len*d` values.
#[no_mangle]
pub unsafe extern "C" fn chela_linear_attention(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    len: usize,
    d: usize,
    chunk: usize,
    out: *mut f64,
) -> ChelaStatus {
    guard(|| {
        let n = len * d;
        let t = |p: *const f64, what: &str| -> Result<Tensor, Fail> {
            Ok(Tensor::from_vec(&[1, len, d], slice(p, n, what)?.to_vec())?)
        };
        let inp = AttentionInputs::new(t(q, "q")?, t(k, "k")?, t(v, "v")?)?;
        let y = linear_attention_chunked(&inp, &AttnNorm::unit(d), chunk)?;
        write_out(y.data(), out, n)
    })
}

/// Causal convolution `out[t] = sum_j kernel[j] x[t-j]` by FFT, truncated
/// to `len` outputs.
///
/// # Safety
/// `kernel` must hold `kernel_len` values, `x` and `out` `len` values.
#[no_mangle]
pub unsafe extern "C" fn chela_causal_conv(
    kernel: *const f64,
    kernel_len: usize,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> ChelaStatus {
    guard(|| {
        let kernel = slice(kernel, kernel_len, "kernel")?;
        let x = slice(x, len, "x")?;
        let y = causal_conv_fft(kernel, x)?;
        write_out(&y, out, len)
    })
}
