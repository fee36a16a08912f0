//! C ABI over a loaded mgf checkpoint.
//!
//! Every function returns an `MgfStatus`; on failure the message is kept in a
//! thread-local buffer readable through `mgf_last_error`. Handles are opaque
//! and must be released with `mgf_model_free`. A handle is not synchronized:
//! share it across threads only with external locking.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mgf::numerics::Rng;
use mgf::training::load_checkpoint;
use mgf::{MgfError, MgfModel, PredictOptions, PriorEdit};

/// Status codes returned by every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct MgfModelHandle {
    model: MgfModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &MgfError) -> MgfStatus {
    match e {
        MgfError::Io(_) => MgfStatus::Io,
        MgfError::Checkpoint(_) | MgfError::Json(_) => MgfStatus::Checkpoint,
        MgfError::InvalidArgument(_) | MgfError::Shape { .. } | MgfError::Config(_) => MgfStatus::InvalidArgument,
        _ => MgfStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MgfStatus, String)>) -> MgfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MgfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mgf");
            MgfStatus::Internal
        }
    }
}

fn lift(e: MgfError) -> (MgfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MgfStatus, String) {
    (MgfStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next mgf call on the same thread.
#[no_mangle]
pub extern "C" fn mgf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file and writes a new handle to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgf_model_load(path: *const c_char, out: *mut *mut MgfModelHandle) -> MgfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MgfStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = load_checkpoint(path).and_then(|c| c.to_model()).map_err(lift)?;
        *out = Box::into_raw(Box::new(MgfModelHandle { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from `mgf_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgf_model_free(handle: *mut MgfModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Observation length, prediction horizon and number of prior components.
///
/// # Safety
/// `handle` must be live; output pointers may be null to skip a value.
#[no_mangle]
pub unsafe extern "C" fn mgf_model_dims(
    handle: *const MgfModelHandle,
    t_obs: *mut usize,
    t_fut: *mut usize,
    k: *mut usize,
) -> MgfStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let cfg = h.model.config();
        for (p, v) in [(t_obs, cfg.t_obs), (t_fut, cfg.t_fut), (k, h.model.prior().k())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Current prior version.
///
/// # Safety
/// `handle` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mgf_prior_version(handle: *const MgfModelHandle, out: *mut u64) -> MgfStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.model.prior().version();
        Ok(())
    })
}

/// Draws `m` trajectories for a history of `n_points` (x, y) pairs.
///
/// `out_xy` receives `m * t_fut * 2` absolute coordinates, row-major by
/// candidate then step. `out_components` (m entries) and `out_log_probs`
/// (m entries) may be null. With `clustering` nonzero, `j` samples are drawn
/// and reduced to `m` centroids.
///
/// # Safety
/// `history` must hold `2 * n_points` doubles and `out_xy` `out_len` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mgf_predict(
    handle: *const MgfModelHandle,
    history: *const f64,
    n_points: usize,
    m: usize,
    seed: u64,
    clustering: i32,
    j: usize,
    out_xy: *mut f64,
    out_len: usize,
    out_components: *mut usize,
    out_log_probs: *mut f64,
) -> MgfStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if history.is_null() {
            return Err(null("history"));
        }
        if out_xy.is_null() {
            return Err(null("out_xy"));
        }
        let need = m * h.model.config().t_fut * 2;
        if out_len < need {
            return Err((
                MgfStatus::BufferTooSmall,
                format!("out_xy needs {need} doubles, got {out_len}"),
            ));
        }
        let flat = std::slice::from_raw_parts(history, 2 * n_points);
        let points: Vec<[f64; 2]> = flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let opts = PredictOptions {
            clustering: clustering != 0,
            oversample: j,
        };
        let set = h.model.predict(&points, m, &mut Rng::seed(seed), opts).map_err(lift)?;
        let out = std::slice::from_raw_parts_mut(out_xy, need);
        for (dst, v) in out.iter_mut().zip(set.candidates.iter().flatten().flatten()) {
            *dst = *v;
        }
        if !out_components.is_null() {
            std::slice::from_raw_parts_mut(out_components, m).copy_from_slice(&set.components);
        }
        if !out_log_probs.is_null() {
            std::slice::from_raw_parts_mut(out_log_probs, m).copy_from_slice(&set.log_probs);
        }
        Ok(())
    })
}

/// Replaces the prior weights (renormalized) and bumps the prior version.
///
/// # Safety
/// `handle` must be live and `weights` hold `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn mgf_set_weights(handle: *mut MgfModelHandle, weights: *const f64, k: usize) -> MgfStatus {
    guard(|| {
        let h = handle.as_mut().ok_or_else(|| null("handle"))?;
        if weights.is_null() {
            return Err(null("weights"));
        }
        let weights = std::slice::from_raw_parts(weights, k).to_vec();
        let prior = h.model.prior().edit(&PriorEdit::SetWeights { weights }).map_err(lift)?;
        h.model.set_prior(prior).map_err(lift)
    })
}
