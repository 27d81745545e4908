//! C ABI over `auecrl-core`.
//!
//! Objects are opaque handles created by `*_new`, `*_load` or `*_generate`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`AuecrlStatus`]; on failure `auecrl_last_error` describes the
//! problem until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use auecrl::checkpoint;
use auecrl::knowledge::{KnowledgeBase, PriorMatrix};
use auecrl::losses::{DEFAULT_ALPHA, DEFAULT_LAMBDA};
use auecrl::model::{ModelConfig, ModelState};
use auecrl::synthdata::{self, Dataset, GenConfig};
use auecrl::training::{self, LossSetup, Stage, StagePlan};
use auecrl::Error;

/// Result of every fallible call.
#[allow(non_camel_case_types)]
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuecrlStatus {
    AUECRL_OK = 0,
    AUECRL_ERR_NULL = 1,
    AUECRL_ERR_UTF8 = 2,
    AUECRL_ERR_PARSE = 3,
    AUECRL_ERR_VALIDATION = 4,
    AUECRL_ERR_SHAPE = 5,
    AUECRL_ERR_NUMERICS = 6,
    AUECRL_ERR_CONFIG = 7,
    AUECRL_ERR_FORMAT = 8,
    AUECRL_ERR_IO = 9,
    AUECRL_ERR_PANIC = 10,
}

use AuecrlStatus::*;

/// Knowledge base plus the prior matrix derived from it.
pub struct AuecrlKnowledge {
    kb: KnowledgeBase,
    prior: PriorMatrix,
}

pub struct AuecrlDataset {
    data: Dataset,
}

pub struct AuecrlModel {
    model: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AuecrlStatus {
    match e {
        Error::Parse(_) => AUECRL_ERR_PARSE,
        Error::Validation(_) => AUECRL_ERR_VALIDATION,
        Error::Shape(_) => AUECRL_ERR_SHAPE,
        Error::Numerics(_) => AUECRL_ERR_NUMERICS,
        Error::Config(_) => AUECRL_ERR_CONFIG,
        Error::Format(_) => AUECRL_ERR_FORMAT,
        Error::Io(_) => AUECRL_ERR_IO,
    }
}

struct Fail(AuecrlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AuecrlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AUECRL_OK,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AUECRL_ERR_PANIC
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(AUECRL_ERR_NULL, format!("{what} is null")))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(AUECRL_ERR_NULL, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(AUECRL_ERR_NULL, "path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(AUECRL_ERR_UTF8, "path is not valid UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(AUECRL_ERR_NULL, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn model_config(k: &AuecrlKnowledge, input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        n_expr: k.kb.n_expressions(),
        n_aus: k.kb.n_aus(),
        ..ModelConfig::default()
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn auecrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// The built-in knowledge base.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn auecrl_knowledge_builtin(out: *mut *mut AuecrlKnowledge) -> AuecrlStatus {
    guard(|| {
        let kb = KnowledgeBase::builtin();
        let prior = kb.prior();
        put(out, AuecrlKnowledge { kb, prior })
    })
}

/// Loads a knowledge file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn auecrl_knowledge_load(
    path: *const c_char,
    out: *mut *mut AuecrlKnowledge,
) -> AuecrlStatus {
    guard(|| {
        let kb = KnowledgeBase::load(path_arg(path)?)?;
        let prior = kb.prior();
        put(out, AuecrlKnowledge { kb, prior })
    })
}

/// # Safety
/// `k` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn auecrl_knowledge_free(k: *mut AuecrlKnowledge) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// # Safety
/// `k` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn auecrl_knowledge_n_expressions(k: *const AuecrlKnowledge) -> usize {
    k.as_ref().map_or(0, |k| k.kb.n_expressions())
}

/// # Safety
/// `k` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn auecrl_knowledge_n_aus(k: *const AuecrlKnowledge) -> usize {
    k.as_ref().map_or(0, |k| k.kb.n_aus())
}

/// Copies the `E × A` prior matrix, row-major, into `out` (`len` must be
/// exactly `E * A`).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn auecrl_knowledge_prior(
    k: *const AuecrlKnowledge,
    out: *mut f64,
    len: usize,
) -> AuecrlStatus {
    guard(|| {
        let k = borrow(k, "knowledge")?;
        let data = k.prior.tensor().data();
        if out.is_null() {
            return Err(Fail(AUECRL_ERR_NULL, "output buffer is null".into()));
        }
        if len != data.len() {
            return Err(Fail(
                AUECRL_ERR_SHAPE,
                format!("prior has {} entries, buffer holds {len}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, len);
        Ok(())
    })
}

/// Generates a planted synthetic dataset.
///
/// # Safety
/// `k` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn auecrl_dataset_generate(
    k: *const AuecrlKnowledge,
    n: usize,
    input_dim: usize,
    signal: f64,
    noise: f64,
    seed: u64,
    out: *mut *mut AuecrlDataset,
) -> AuecrlStatus {
    guard(|| {
        let k = borrow(k, "knowledge")?;
        let cfg = GenConfig {
            n_samples: n,
            input_dim,
            n_expr: k.kb.n_expressions(),
            n_aus: k.kb.n_aus(),
            signal_strength: signal,
            noise_std: noise,
            seed,
        };
        let data = synthdata::generate(&cfg, &k.prior)?;
        put(out, AuecrlDataset { data })
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn auecrl_dataset_read(
    path: *const c_char,
    out: *mut *mut AuecrlDataset,
) -> AuecrlStatus {
    guard(|| {
        let data = Dataset::read(path_arg(path)?)?;
        put(out, AuecrlDataset { data })
    })
}

/// # Safety
/// `d` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn auecrl_dataset_write(
    d: *const AuecrlDataset,
    path: *const c_char,
) -> AuecrlStatus {
    guard(|| {
        let d = borrow(d, "dataset")?;
        d.data.write(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn auecrl_dataset_len(d: *const AuecrlDataset) -> usize {
    d.as_ref().map_or(0, |d| d.data.len())
}

/// Splits off the samples from `at` onward into a new dataset; `d` keeps
/// the first `at`.
///
/// # Safety
/// `d` must be a live handle; `tail` must be writable.
#[no_mangle]
pub unsafe extern "C" fn auecrl_dataset_split(
    d: *mut AuecrlDataset,
    at: usize,
    tail: *mut *mut AuecrlDataset,
) -> AuecrlStatus {
    guard(|| {
        let d = borrow_mut(d, "dataset")?;
        if at == 0 || at >= d.data.len() {
            return Err(Fail(
                AUECRL_ERR_CONFIG,
                format!("split point {at} must be inside 1..{}", d.data.len()),
            ));
        }
        let (head, rest) = d.data.split_at(at);
        put(tail, AuecrlDataset { data: rest })?;
        d.data = head;
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn auecrl_dataset_free(d: *mut AuecrlDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// A freshly initialized model with default widths.
///
/// # Safety
/// `k` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_new(
    k: *const AuecrlKnowledge,
    input_dim: usize,
    seed: u64,
    out: *mut *mut AuecrlModel,
) -> AuecrlStatus {
    guard(|| {
        let k = borrow(k, "knowledge")?;
        let model = ModelState::init(&model_config(k, input_dim), &k.prior, seed)?;
        put(out, AuecrlModel { model })
    })
}

/// Runs stages 1 to 3 with default hyperparameters. `epochs` of 0 keeps
/// the default epoch count.
///
/// # Safety
/// All handles must be live.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_train(
    m: *mut AuecrlModel,
    k: *const AuecrlKnowledge,
    d: *const AuecrlDataset,
    epochs: usize,
    seed: u64,
) -> AuecrlStatus {
    guard(|| {
        let m = borrow_mut(m, "model")?;
        let k = borrow(k, "knowledge")?;
        let d = borrow(d, "dataset")?;
        let setup = LossSetup::new(&k.kb, &k.prior, DEFAULT_ALPHA, DEFAULT_LAMBDA)?;
        for stage in Stage::ALL {
            let mut plan = StagePlan::default_for(stage);
            if epochs > 0 {
                plan.epochs = epochs;
            }
            training::run_stage(&plan, &mut m.model, &d.data, &setup, seed)?;
        }
        Ok(())
    })
}

/// Average (mean per-class) and overall accuracy in percent.
///
/// # Safety
/// Handles must be live; output pointers writable or null.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_evaluate(
    m: *const AuecrlModel,
    d: *const AuecrlDataset,
    average_acc: *mut f64,
    overall_acc: *mut f64,
) -> AuecrlStatus {
    guard(|| {
        let m = borrow(m, "model")?;
        let d = borrow(d, "dataset")?;
        let metrics = training::evaluate(&m.model, &d.data)?;
        if let Some(a) = average_acc.as_mut() {
            *a = metrics.average_acc;
        }
        if let Some(o) = overall_acc.as_mut() {
            *o = metrics.overall_acc;
        }
        Ok(())
    })
}

/// Writes the expression distribution for one input into `p_out`.
///
/// # Safety
/// `x` must point to `x_len` doubles and `p_out` to `p_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_predict(
    m: *const AuecrlModel,
    x: *const f64,
    x_len: usize,
    p_out: *mut f64,
    p_len: usize,
) -> AuecrlStatus {
    guard(|| {
        let m = borrow(m, "model")?;
        if x.is_null() || p_out.is_null() {
            return Err(Fail(AUECRL_ERR_NULL, "buffer is null".into()));
        }
        let cfg = m.model.config();
        if x_len != cfg.input_dim || p_len != cfg.n_expr {
            return Err(Fail(
                AUECRL_ERR_SHAPE,
                format!(
                    "expected input of {} and output of {}, got {x_len} and {p_len}",
                    cfg.input_dim, cfg.n_expr
                ),
            ));
        }
        let input = std::slice::from_raw_parts(x, x_len);
        let p = m.model.classify(input)?;
        ptr::copy_nonoverlapping(p.as_ptr(), p_out, p_len);
        Ok(())
    })
}

/// Last completed training stage, 0 for an untrained model.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_stage(m: *const AuecrlModel) -> u32 {
    m.as_ref().map_or(0, |m| m.model.stage())
}

/// # Safety
/// `m` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_save(m: *const AuecrlModel, path: *const c_char) -> AuecrlStatus {
    guard(|| {
        let m = borrow(m, "model")?;
        checkpoint::save(&m.model, path_arg(path)?)?;
        Ok(())
    })
}

/// Loads a checkpoint written for a model with default widths and the
/// given input dimension.
///
/// # Safety
/// `k` must be a live handle; `path` a nul-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_load(
    k: *const AuecrlKnowledge,
    path: *const c_char,
    input_dim: usize,
    out: *mut *mut AuecrlModel,
) -> AuecrlStatus {
    guard(|| {
        let k = borrow(k, "knowledge")?;
        let model = checkpoint::load(path_arg(path)?, &model_config(k, input_dim), &k.prior)?;
        put(out, AuecrlModel { model })
    })
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn auecrl_model_free(m: *mut AuecrlModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
