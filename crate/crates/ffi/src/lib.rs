//! C ABI for the ECB trainer.
//!
//! Every object crosses the boundary as an opaque pointer created by an
//! `ecb_*_new`/`_load`/`_generate` call and released by the matching
//! `ecb_*_free`. Every fallible call returns an [`EcbStatus`]; on failure the
//! message is available from [`ecb_last_error`] on the same thread. Panics
//! are caught and reported as [`EcbStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ecb_core::autodiff::Tensor;
use ecb_core::data::{generate_pair, DomainDataset, GenSpec, GeneratedPair, ShiftSpec};
use ecb_core::ecb::{EcbConfig, EcbState, Trainer};
use ecb_core::eval;
use ecb_core::nn::checkpoint::Checkpoint;
use ecb_core::nn::Branch;
use ecb_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcbStatus {
    Ok = 0,
    /// A null pointer, bad UTF-8 or an out-of-range enum value.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Dimension = 4,
    /// A non-finite loss or parameter; the training run cannot continue.
    Numeric = 5,
    Io = 6,
    Format = 7,
    Internal = 8,
    Panic = 9,
}

/// Which branch to evaluate. The CNN branch is the deployed model.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcbBranch {
    Cnn = 0,
    Vit = 1,
}

pub struct EcbConfigHandle {
    inner: EcbConfig,
}

pub struct EcbDatasetHandle {
    inner: DomainDataset,
}

/// A training run in progress. It owns a copy of the dataset, so the dataset
/// handle it was created from may be freed at any time.
pub struct EcbSessionHandle {
    // Declared before `data` so it is dropped first: it borrows from it.
    trainer: Trainer<'static>,
    config: EcbConfig,
    data: Box<DomainDataset>,
}

pub struct EcbModelHandle {
    state: EcbState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> EcbStatus {
    match err {
        Error::Dimension(_) => EcbStatus::Dimension,
        Error::Numeric(_) => EcbStatus::Numeric,
        Error::Config(_) => EcbStatus::Config,
        Error::Data(_) => EcbStatus::Data,
        Error::Format(_) => EcbStatus::Format,
        Error::Io { .. } => EcbStatus::Io,
        Error::Contract(_) => EcbStatus::InvalidArgument,
        Error::Index(_) => EcbStatus::Internal,
        Error::Stage { source, .. } => status_of(source),
    }
}

struct Fail(EcbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(EcbStatus::InvalidArgument, msg.to_string())
}

/// Run `f`, translating errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EcbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EcbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            EcbStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s).map(CString::into_raw).map_err(|_| Fail(EcbStatus::Internal, "string contains NUL".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failed call on this thread, or null if the
/// last call succeeded. Valid until the next `ecb_*` call on this thread.
#[no_mangle]
pub extern "C" fn ecb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ecb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default training configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_config_new_default(out: *mut *mut EcbConfigHandle) -> EcbStatus {
    guard(|| write_out(out, boxed(EcbConfigHandle { inner: EcbConfig::default() })))
}

/// Parse a `key = value` configuration text on top of the defaults.
///
/// # Safety
/// `config_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_config_from_text(config_text: *const c_char, out: *mut *mut EcbConfigHandle) -> EcbStatus {
    guard(|| {
        let inner = EcbConfig::from_text(text(config_text, "text")?)?;
        write_out(out, boxed(EcbConfigHandle { inner }))
    })
}

/// Set one key. The configuration is left unchanged on failure.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ecb_config_set(config: *mut EcbConfigHandle, key: *const c_char, value: *const c_char) -> EcbStatus {
    guard(|| {
        let cfg = borrow_mut(config, "config")?;
        let mut next = cfg.inner.clone();
        next.set(text(key, "key")?, text(value, "value")?)?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Render the configuration as text; release with [`ecb_string_free`].
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_config_to_text(config: *const EcbConfigHandle, out: *mut *mut c_char) -> EcbStatus {
    guard(|| {
        let s = into_c_string(borrow(config, "config")?.inner.to_text())?;
        write_out(out, s)
    })
}

/// # Safety
/// `config` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_config_free(config: *mut EcbConfigHandle) {
    free(config)
}

fn split(pair: &GeneratedPair, k_shot: usize) -> Result<EcbDatasetHandle, Fail> {
    Ok(EcbDatasetHandle { inner: DomainDataset::from_pair(pair, k_shot, pair.spec.seed)? })
}

/// Generate a source/target pair and split `k_shot` labeled target samples
/// per class off the target. `shift_preset` is `"default"` or `"identity"`.
///
/// # Safety
/// `shift_preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_dataset_generate(
    seed: u64,
    classes: usize,
    n_source: usize,
    n_target: usize,
    shift_preset: *const c_char,
    k_shot: usize,
    out: *mut *mut EcbDatasetHandle,
) -> EcbStatus {
    guard(|| {
        let shift = ShiftSpec::preset(text(shift_preset, "shift_preset")?)?;
        let pair = generate_pair(&GenSpec::new(seed, classes, n_source, n_target, shift))?;
        write_out(out, boxed(split(&pair, k_shot)?))
    })
}

/// Load a dataset file written by `ecb gen-data` and split it as
/// [`ecb_dataset_generate`] does.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_dataset_load(path: *const c_char, k_shot: usize, out: *mut *mut EcbDatasetHandle) -> EcbStatus {
    guard(|| {
        let pair = GeneratedPair::load(Path::new(text(path, "path")?))?;
        write_out(out, boxed(split(&pair, k_shot)?))
    })
}

/// Sizes of the source, labeled target and unlabeled target splits. Any
/// output pointer may be null.
///
/// # Safety
/// `dataset` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_dataset_sizes(
    dataset: *const EcbDatasetHandle,
    source: *mut usize,
    target_labeled: *mut usize,
    target_unlabeled: *mut usize,
) -> EcbStatus {
    guard(|| {
        let d = &borrow(dataset, "dataset")?.inner;
        for (out, n) in [(source, d.source.len()), (target_labeled, d.target_labeled.len()), (target_unlabeled, d.target_unlabeled.len())] {
            if !out.is_null() {
                out.write(n);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_dataset_free(dataset: *mut EcbDatasetHandle) {
    free(dataset)
}

/// Start a training run. The session copies both arguments.
///
/// # Safety
/// `config` and `dataset` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_session_new(
    config: *const EcbConfigHandle,
    dataset: *const EcbDatasetHandle,
    out: *mut *mut EcbSessionHandle,
) -> EcbStatus {
    guard(|| {
        let config = borrow(config, "config")?.inner.clone();
        let data = Box::new(borrow(dataset, "dataset")?.inner.clone());
        // SAFETY: the box's heap allocation never moves and is dropped
        // after the trainer (field order), so the borrow stays valid.
        let data_ref: &'static DomainDataset = &*(data.as_ref() as *const DomainDataset);
        let trainer = Trainer::new(&config, data_ref)?;
        write_out(out, boxed(EcbSessionHandle { trainer, config, data }))
    })
}

/// Run up to `iterations` training iterations, stopping early once the
/// configured total is reached. `done` (may be null) receives how many ran.
/// After a `ECB_STATUS_NUMERIC` failure the session should be freed.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_session_step(session: *mut EcbSessionHandle, iterations: usize, done: *mut usize) -> EcbStatus {
    guard(|| {
        let s = borrow_mut(session, "session")?;
        let mut ran = 0;
        let result = (|| {
            while ran < iterations && !s.trainer.is_done() {
                s.trainer.step()?;
                ran += 1;
            }
            Ok::<(), Error>(())
        })();
        if !done.is_null() {
            done.write(ran);
        }
        Ok(result?)
    })
}

/// Iterations completed so far and whether the run is finished. Either
/// output pointer may be null.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_session_progress(session: *const EcbSessionHandle, iteration: *mut usize, finished: *mut bool) -> EcbStatus {
    guard(|| {
        let s = borrow(session, "session")?;
        if !iteration.is_null() {
            iteration.write(s.trainer.state().iter);
        }
        if !finished.is_null() {
            finished.write(s.trainer.is_done());
        }
        Ok(())
    })
}

fn branch_of(state: &EcbState, branch: EcbBranch) -> &Branch {
    match branch {
        EcbBranch::Cnn => &state.cnn,
        EcbBranch::Vit => &state.vit,
    }
}

fn branch_arg(raw: i32) -> Result<EcbBranch, Fail> {
    match raw {
        0 => Ok(EcbBranch::Cnn),
        1 => Ok(EcbBranch::Vit),
        _ => Err(invalid(&format!("unknown branch {raw}"))),
    }
}

/// Accuracy in percent of one branch on the session's unlabeled target split.
/// `branch` takes an [`EcbBranch`] value.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_session_target_accuracy(session: *const EcbSessionHandle, branch: i32, out: *mut f64) -> EcbStatus {
    guard(|| {
        let s = borrow(session, "session")?;
        let b = branch_of(s.trainer.state(), branch_arg(branch)?);
        write_out(out, eval::accuracy(b, &s.data.target_unlabeled)?)
    })
}

/// Write the current parameters and config as a checkpoint file readable by
/// `ecb eval` and [`ecb_model_load`].
///
/// # Safety
/// `session` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ecb_session_save_checkpoint(session: *const EcbSessionHandle, path: *const c_char) -> EcbStatus {
    guard(|| {
        let s = borrow(session, "session")?;
        let path = Path::new(text(path, "path")?);
        Ok(s.trainer.state().to_checkpoint(&s.config, Default::default()).save(path)?)
    })
}

/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_session_free(session: *mut EcbSessionHandle) {
    free(session)
}

/// Load a checkpoint for inference.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_model_load(path: *const c_char, out: *mut *mut EcbModelHandle) -> EcbStatus {
    guard(|| {
        let ckpt = Checkpoint::load(Path::new(text(path, "path")?))?;
        let (state, _) = EcbState::from_checkpoint(&ckpt)?;
        write_out(out, boxed(EcbModelHandle { state }))
    })
}

/// Input geometry: channels, image side and class count. Any output pointer
/// may be null.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_model_geometry(model: *const EcbModelHandle, channels: *mut usize, side: *mut usize, classes: *mut usize) -> EcbStatus {
    guard(|| {
        let g = borrow(model, "model")?.state.cnn.geometry();
        for (out, n) in [(channels, g.channels), (side, g.side), (classes, g.classes)] {
            if !out.is_null() {
                out.write(n);
            }
        }
        Ok(())
    })
}

/// Predict a class for each of `n` images with the CNN branch. `images`
/// holds `n * channels * side * side` values in row-major `[n, c, h, w]`
/// order; `labels` receives `n` class indices.
///
/// # Safety
/// `images` must point to that many doubles and `labels` to `n` writable
/// `size_t`s.
#[no_mangle]
pub unsafe extern "C" fn ecb_model_predict(model: *const EcbModelHandle, images: *const f64, n: usize, labels: *mut usize) -> EcbStatus {
    guard(|| {
        let state = &borrow(model, "model")?.state;
        if n == 0 {
            return Ok(());
        }
        if images.is_null() || labels.is_null() {
            return Err(invalid("images or labels is null"));
        }
        let [c, h, w] = state.cnn.geometry().image_shape();
        let len = n * c * h * w;
        let x = Tensor::new(vec![n, c, h, w], std::slice::from_raw_parts(images, len).to_vec())?;
        let pred = eval::predict(state, &x)?;
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&pred);
        Ok(())
    })
}

/// Accuracy in percent of one branch on a dataset's unlabeled target split.
///
/// # Safety
/// `model` and `dataset` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecb_model_target_accuracy(
    model: *const EcbModelHandle,
    dataset: *const EcbDatasetHandle,
    branch: i32,
    out: *mut f64,
) -> EcbStatus {
    guard(|| {
        let state = &borrow(model, "model")?.state;
        let d = &borrow(dataset, "dataset")?.inner;
        let b = branch_of(state, branch_arg(branch)?);
        if b.geometry().classes != d.classes || b.geometry().image_shape().as_slice() != d.image_shape() {
            return Err(Fail(EcbStatus::Data, "dataset does not match the model geometry".into()));
        }
        write_out(out, eval::accuracy(b, &d.target_unlabeled)?)
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecb_model_free(model: *mut EcbModelHandle) {
    free(model)
}
