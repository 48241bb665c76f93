//! C ABI over `psmm`.
//!
//! Objects live behind opaque handles created by `*_new` / `*_load` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`PsmmStatus`]; on failure the message is available from
//! [`psmm_last_error`] on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use psmm::diffcore::Tensor;
use psmm::dynimg::{prefix_mean, rank_pool_fit, RankPoolConfig};
use psmm::metrics::{self, Label, ScoredEntry, ScoredSet};
use psmm::netgraph::SampleInput;
use psmm::trainer::Model;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    Panic = 6,
}

/// APCER, BPCER and ACER at one threshold.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PsmmRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// Rank-pooling solver for a fixed window length.
pub struct PsmmRankPool {
    config: RankPoolConfig,
}

/// Growing set of labelled scores.
pub struct PsmmScoredSet {
    set: ScoredSet,
}

/// Trained network with its parameters.
pub struct PsmmModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(PsmmStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(PsmmStatus::InvalidArgument, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PsmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsmmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PsmmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(PsmmStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn psmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a solver for windows of `window` frames (at least 2).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn psmm_rank_pool_new(window: usize, out: *mut *mut PsmmRankPool) -> PsmmStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = RankPoolConfig::new(window).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(PsmmRankPool { config }));
        Ok(())
    })
}

/// Dynamic image of `window` consecutive frames of `frame_len` values each,
/// stored back to back in `frames`. Prefix means are taken internally.
/// Writes `frame_len` values to `out_d` and, if non-null, the objective to
/// `out_objective`.
///
/// # Safety
/// `frames` must hold `window * frame_len` readable values and `out_d`
/// `frame_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn psmm_rank_pool_fit(
    pool: *const PsmmRankPool,
    frames: *const f64,
    frame_len: usize,
    out_d: *mut f64,
    out_objective: *mut f64,
) -> PsmmStatus {
    guard(|| {
        non_null(pool, "pool")?;
        non_null(frames, "frames")?;
        non_null(out_d, "out_d")?;
        if frame_len == 0 {
            return Err(Failure::invalid("frame_len must be positive"));
        }
        let pool = &*pool;
        let k = pool.config.window();
        let data = slice::from_raw_parts(frames, k * frame_len);
        let seq: Vec<Tensor> = data.chunks(frame_len).map(|c| Tensor::vector(c.to_vec())).collect();
        let fit = prefix_mean(&seq)
            .and_then(|v| rank_pool_fit(&v, &pool.config))
            .map_err(|e| Failure(PsmmStatus::Numeric, e.to_string()))?;
        slice::from_raw_parts_mut(out_d, frame_len).copy_from_slice(fit.d.data());
        if !out_objective.is_null() {
            *out_objective = fit.objective;
        }
        Ok(())
    })
}

/// # Safety
/// `pool` must come from [`psmm_rank_pool_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psmm_rank_pool_free(pool: *mut PsmmRankPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Creates an empty scored set; never returns null.
#[no_mangle]
pub extern "C" fn psmm_scored_set_new() -> *mut PsmmScoredSet {
    Box::into_raw(Box::new(PsmmScoredSet { set: ScoredSet::default() }))
}

/// Appends one score; `bona_fide` non-zero marks a genuine presentation.
///
/// # Safety
/// `set` must be a live handle from [`psmm_scored_set_new`].
#[no_mangle]
pub unsafe extern "C" fn psmm_scored_set_push(set: *mut PsmmScoredSet, score: f64, bona_fide: i32) -> PsmmStatus {
    guard(|| {
        non_null(set, "set")?;
        if !score.is_finite() {
            return Err(Failure(PsmmStatus::Numeric, "score is not finite".into()));
        }
        let s = &mut (*set).set;
        let label = if bona_fide != 0 { Label::BonaFide } else { Label::Attack };
        let id = format!("v{}", s.len());
        s.entries.push(ScoredEntry::new(id, score, label));
        Ok(())
    })
}

/// Number of scores in the set, 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psmm_scored_set_len(set: *const PsmmScoredSet) -> usize {
    if set.is_null() {
        0
    } else {
        (*set).set.len()
    }
}

fn metric_failure(e: metrics::MetricsError) -> Failure {
    Failure(PsmmStatus::Data, e.to_string())
}

/// Error rates with scores at or above `threshold` accepted as bona fide.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psmm_scored_set_rates(
    set: *const PsmmScoredSet,
    threshold: f64,
    out: *mut PsmmRates,
) -> PsmmStatus {
    guard(|| {
        non_null(set, "set")?;
        non_null(out, "out")?;
        let r = metrics::rates_at(&(*set).set, threshold).map_err(metric_failure)?;
        *out = PsmmRates {
            apcer: r.apcer,
            bpcer: r.bpcer,
            acer: r.acer,
        };
        Ok(())
    })
}

/// Area under the ROC curve.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psmm_scored_set_auc(set: *const PsmmScoredSet, out: *mut f64) -> PsmmStatus {
    guard(|| {
        non_null(set, "set")?;
        non_null(out, "out")?;
        *out = metrics::roc(&(*set).set).map_err(metric_failure)?.auc();
        Ok(())
    })
}

/// Largest true-positive rate over ROC points with FPR at most `fpr`.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psmm_scored_set_tpr_at_fpr(set: *const PsmmScoredSet, fpr: f64, out: *mut f64) -> PsmmStatus {
    guard(|| {
        non_null(set, "set")?;
        non_null(out, "out")?;
        if !(0.0..=1.0).contains(&fpr) {
            return Err(Failure::invalid("fpr must lie in [0, 1]"));
        }
        *out = metrics::tpr_at_fpr(&metrics::roc(&(*set).set).map_err(metric_failure)?, fpr);
        Ok(())
    })
}

/// # Safety
/// `set` must come from [`psmm_scored_set_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psmm_scored_set_free(set: *mut PsmmScoredSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Loads `model.cfg` and `model.ckpt` from directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psmm_model_load(dir: *const c_char, out: *mut *mut PsmmModel) -> PsmmStatus {
    guard(|| {
        non_null(dir, "dir")?;
        non_null(out, "out")?;
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Failure::invalid("path is not UTF-8"))?;
        let model = Model::load_dir(Path::new(dir)).map_err(|e| {
            let status = match e {
                psmm::trainer::TrainError::Io(_) => PsmmStatus::Io,
                _ => PsmmStatus::Data,
            };
            Failure(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(PsmmModel { model }));
        Ok(())
    })
}

/// Side length of the square inputs the model expects.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psmm_model_input_size(model: *const PsmmModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).model.net.spec().input_size
    }
}

/// Number of modality inputs; their order is colour, depth, IR restricted
/// to the modalities the model uses.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psmm_model_num_modalities(model: *const PsmmModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).model.net.config().modalities.len()
    }
}

/// Channel count of modality input `index` (3 for colour, 1 otherwise), or 0
/// when out of range.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psmm_model_channels(model: *const PsmmModel, index: usize) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).model.net.config().modalities.get(index).map_or(0, |m| m.channels())
}

/// Liveness score in `[0, 1]` of one sample. `static_imgs[i]` and
/// `dynamic_imgs[i]` point to `C × S × S` values (channel-major) for the
/// model's `i`-th modality; `count` must equal the number of modalities.
///
/// # Safety
/// The pointer arrays must hold `count` pointers, each to enough readable
/// values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psmm_model_score(
    model: *const PsmmModel,
    static_imgs: *const *const f64,
    dynamic_imgs: *const *const f64,
    count: usize,
    out: *mut f64,
) -> PsmmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(static_imgs, "static_imgs")?;
        non_null(dynamic_imgs, "dynamic_imgs")?;
        non_null(out, "out")?;
        let m = &(*model).model;
        let mods = &m.net.config().modalities;
        if count != mods.len() {
            return Err(Failure::invalid(format!("expected {} modality inputs, got {count}", mods.len())));
        }
        let size = m.net.spec().input_size;
        let statics = slice::from_raw_parts(static_imgs, count);
        let dynamics = slice::from_raw_parts(dynamic_imgs, count);
        let mut input = SampleInput::new();
        for (i, &modality) in mods.iter().enumerate() {
            non_null(statics[i], "static image")?;
            non_null(dynamics[i], "dynamic image")?;
            let shape = vec![modality.channels(), size, size];
            let n = shape.iter().product();
            let read = |p: *const f64| Tensor::new(shape.clone(), slice::from_raw_parts(p, n).to_vec()).expect("sized");
            input.insert(modality, read(statics[i]), read(dynamics[i]));
        }
        *out = m.score(&input).map_err(|e| Failure(PsmmStatus::Numeric, e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`psmm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psmm_model_free(model: *mut PsmmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
