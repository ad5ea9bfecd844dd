//! C interface to the infomask core.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`ImStatus`]; on failure [`im_last_error`] returns a message for the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use infomask::colearning::{batch_for_step, load_checkpoint, similarity_matrix, TrainConfig, Trainer};
use infomask::data::{gen_dataset, Dataset};
use infomask::encoders::ModelParams;
use infomask::evalcli::{default_dsl_tau, dsl_adjust, rank_metrics, Direction};
use infomask::masking::{extract_cls_weights, informed_mask, Order};
use infomask::numerics::Tensor;
use infomask::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Contract = 5,
    NonFinite = 6,
    Checkpoint = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Trained or freshly initialized model parameters.
pub struct ImModel {
    params: ModelParams,
}

/// A synthetic corpus held in memory.
pub struct ImDataset {
    data: Dataset,
}

/// A training run in progress.
pub struct ImTrainer {
    trainer: Trainer,
}

/// Retrieval summary of one direction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ImRetrieval {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub rsum: f64,
}

/// Loss breakdown of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ImLosses {
    pub step: u64,
    pub vtc: f64,
    pub vtc_h: f64,
    pub vvc_h: f64,
    pub vtc_l: f64,
    pub vvc_l: f64,
    pub adv: f64,
    pub total: f64,
    pub attn_top30: f64,
    pub attn_bot30: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(ImStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension(_) => ImStatus::Dimension,
            Error::Config(_) => ImStatus::Config,
            Error::Contract(_) => ImStatus::Contract,
            Error::Input(_) | Error::Json(_) => ImStatus::InvalidArgument,
            Error::NonFinite(_) => ImStatus::NonFinite,
            Error::Checkpoint(_) => ImStatus::Checkpoint,
            Error::Io(_) => ImStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

fn fail<T>(code: ImStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(code, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ImStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let (code, msg) = match outcome {
        Ok(Ok(())) => (ImStatus::Ok, String::new()),
        Ok(Err(Failure(code, msg))) => (code, msg),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (ImStatus::Panic, format!("panic: {msg}"))
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    code
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(ImStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(ImStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(ImStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(ImStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn config_from(json: *const c_char) -> Result<TrainConfig, Failure> {
    if json.is_null() {
        return Ok(TrainConfig::default());
    }
    Ok(TrainConfig::from_json(c_str(json, "config")?)?)
}

unsafe fn square(s: *const f64, b: usize) -> Result<Tensor, Failure> {
    if s.is_null() {
        return fail(ImStatus::NullPointer, "similarity matrix is null");
    }
    if b == 0 {
        return fail(ImStatus::InvalidArgument, "matrix size must be positive");
    }
    let data = std::slice::from_raw_parts(s, b * b).to_vec();
    Ok(Tensor::new([b, b], data)?)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(ImStatus::NullPointer, "output handle is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn im_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn im_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh model from a JSON training config (null for defaults).
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_model_new(config_json: *const c_char, seed: u64, out: *mut *mut ImModel) -> ImStatus {
    guard(|| {
        let config = config_from(config_json)?;
        put(out, ImModel { params: ModelParams::init(&config.encoder, seed)? })
    })
}

/// Model parameters from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_model_load(path: *const c_char, out: *mut *mut ImModel) -> ImStatus {
    guard(|| {
        let ck = load_checkpoint(&PathBuf::from(c_str(path, "path")?), None)?;
        put(out, ImModel { params: ck.params })
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn im_model_free(model: *mut ImModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders a synthetic corpus with the geometry of `config_json`.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_dataset_generate(
    count: usize,
    seed: u64,
    config_json: *const c_char,
    out: *mut *mut ImDataset,
) -> ImStatus {
    guard(|| {
        let config = config_from(config_json)?;
        put(out, ImDataset { data: gen_dataset(count, seed, &config.encoder)? })
    })
}

/// # Safety
/// `dataset` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn im_dataset_len(dataset: *const ImDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// # Safety
/// `dataset` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn im_dataset_free(dataset: *mut ImDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Text-to-video scores of the whole corpus, row-major `[n, n]`.
///
/// # Safety
/// Handles must be valid; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn im_similarity(
    model: *const ImModel,
    dataset: *const ImDataset,
    out: *mut f64,
    cap: usize,
) -> ImStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let d = as_ref(dataset, "dataset")?;
        let n = d.data.len();
        if out.is_null() {
            return fail(ImStatus::NullPointer, "output buffer is null");
        }
        if cap < n * n {
            return fail(ImStatus::BufferTooSmall, format!("need {} doubles, got {cap}", n * n));
        }
        let s = similarity_matrix(&m.params, &d.data.all()?)?;
        ptr::copy_nonoverlapping(s.data().as_ptr(), out, n * n);
        Ok(())
    })
}

/// Retrieval metrics with rows as queries and the diagonal as ground truth.
///
/// # Safety
/// `s` must hold `b * b` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_rank_metrics(s: *const f64, b: usize, out: *mut ImRetrieval) -> ImStatus {
    guard(|| {
        let t = square(s, b)?;
        let r = rank_metrics(&t, Direction::T2v, false)?;
        *as_mut(out, "out")? =
            ImRetrieval { r1: r.r_at.r1, r5: r.r_at.r5, r10: r.r_at.r10, mdr: r.mdr, mnr: r.mnr, rsum: r.rsum };
        Ok(())
    })
}

/// DSL reweighting; `tau <= 0` picks 1% of the score scale.
///
/// # Safety
/// `s` and `out` must each hold `b * b` doubles.
#[no_mangle]
pub unsafe extern "C" fn im_dsl_adjust(s: *const f64, b: usize, tau: f64, out: *mut f64) -> ImStatus {
    guard(|| {
        let t = square(s, b)?;
        if out.is_null() {
            return fail(ImStatus::NullPointer, "output buffer is null");
        }
        let tau = if tau > 0.0 { tau } else { default_dsl_tau(&t) };
        let adj = dsl_adjust(&t, tau)?;
        ptr::copy_nonoverlapping(adj.data().as_ptr(), out, b * b);
        Ok(())
    })
}

/// Informed tube mask from one clip's attention `[m, heads, t, t]`.
/// Writes the masked patch indices to `out` and their count to `out_len`.
///
/// # Safety
/// `attn` must hold `m * heads * t * t` doubles; `out` must hold `cap`
/// entries; `out_len` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn im_informed_mask(
    attn: *const f64,
    m: usize,
    heads: usize,
    t: usize,
    a_s: usize,
    a_e: usize,
    ratio: f64,
    high: bool,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> ImStatus {
    guard(|| {
        if attn.is_null() || out.is_null() {
            return fail(ImStatus::NullPointer, "attention or output buffer is null");
        }
        let n = m * heads * t * t;
        if n == 0 {
            return fail(ImStatus::InvalidArgument, "attention extents must be positive");
        }
        let a = Tensor::new([m, heads, t, t], std::slice::from_raw_parts(attn, n).to_vec())?;
        let w = extract_cls_weights(&a, a_s, a_e)?;
        let order = if high { Order::Descending } else { Order::Ascending };
        let mask = informed_mask(&w, ratio, order)?;
        let k = mask.patch_indices.len();
        *as_mut(out_len, "out_len")? = k;
        if cap < k {
            return fail(ImStatus::BufferTooSmall, format!("need {k} entries, got {cap}"));
        }
        ptr::copy_nonoverlapping(mask.patch_indices.as_ptr(), out, k);
        Ok(())
    })
}

/// New training run from a JSON config (null for defaults).
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_new(config_json: *const c_char, out: *mut *mut ImTrainer) -> ImStatus {
    guard(|| {
        let config = config_from(config_json)?;
        put(out, ImTrainer { trainer: Trainer::new(config)? })
    })
}

/// Resumes a run from a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_load(path: *const c_char, out: *mut *mut ImTrainer) -> ImStatus {
    guard(|| {
        let ck = load_checkpoint(&PathBuf::from(c_str(path, "path")?), None)?;
        put(out, ImTrainer { trainer: Trainer::from_checkpoint(ck) })
    })
}

/// One co-learning step on the batch scheduled for the current step.
///
/// # Safety
/// Handles must be valid; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_step(
    trainer: *mut ImTrainer,
    dataset: *const ImDataset,
    out: *mut ImLosses,
) -> ImStatus {
    guard(|| {
        let t = &mut as_mut(trainer, "trainer")?.trainer;
        let d = &as_ref(dataset, "dataset")?.data;
        if t.config.batch_size > d.len() {
            return fail(ImStatus::Config, format!("batch size {} exceeds dataset size {}", t.config.batch_size, d.len()));
        }
        let idx = batch_for_step(d.len(), t.config.batch_size, t.config.seed, t.step)?;
        let o = t.train_step(&d.batch(&idx)?)?;
        if let Some(out) = out.as_mut() {
            let l = &o.losses;
            *out = ImLosses {
                step: l.step,
                vtc: l.vtc,
                vtc_h: l.vtc_h,
                vvc_h: l.vvc_h,
                vtc_l: l.vtc_l,
                vvc_l: l.vvc_l,
                adv: l.adv,
                total: l.total,
                attn_top30: o.attention.top30,
                attn_bot30: o.attention.bot30,
            };
        }
        Ok(())
    })
}

/// Completed steps of a run, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_steps_done(trainer: *const ImTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.trainer.step)
}

/// Writes a checkpoint of the run.
///
/// # Safety
/// `trainer` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_save(trainer: *const ImTrainer, path: *const c_char) -> ImStatus {
    guard(|| {
        let t = &as_ref(trainer, "trainer")?.trainer;
        Ok(t.save(&PathBuf::from(c_str(path, "path")?))?)
    })
}

/// Snapshot of the run's current parameters as a separate model handle.
///
/// # Safety
/// `trainer` must be valid; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_model(trainer: *const ImTrainer, out: *mut *mut ImModel) -> ImStatus {
    guard(|| {
        let t = &as_ref(trainer, "trainer")?.trainer;
        put(out, ImModel { params: t.params.clone() })
    })
}

/// # Safety
/// `trainer` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn im_trainer_free(trainer: *mut ImTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
