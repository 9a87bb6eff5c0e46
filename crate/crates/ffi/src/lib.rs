//! C interface to `modestruct`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible function returns an
//! [`MsStatus`]; on failure `ms_last_error` describes the problem. Strings
//! returned through `char **` arguments are released with `ms_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use modestruct::diagnostics::{hillery, hillery_counts, pearson_pvalue};
use modestruct::forward_model::{full_jpd, ModeSpec, ProbMatrix, SourceModel};
use modestruct::pipeline::{reconstruct, Reconstruction, ReconstructionConfig, RunStatus};
use modestruct::sampling::{sample_counts, CountMatrix};
use modestruct::statistics::ModeType;
use modestruct::{io, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    /// A parameter lies outside the model's domain.
    Domain = 2,
    /// A documented precondition was violated.
    Contract = 3,
    Parse = 4,
    Io = 5,
    InvalidUtf8 = 6,
    /// The test or quantity is undefined for this input.
    Undefined = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsModeType {
    Thermal = 0,
    Poissonian = 1,
    SinglePhoton = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsOccupancy {
    Conjugated = 0,
    Signal = 1,
    Idler = 2,
}

/// Hillery sums. Sigmas are NaN when not available.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MsHillery {
    pub even_sum: f64,
    pub odd_sum: f64,
    pub vacuum: f64,
    pub tail_mass: f64,
    pub even_sigma: f64,
    pub odd_sigma: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MsPearson {
    pub chi2: f64,
    pub p_value: f64,
    pub bins: usize,
    pub dof: usize,
}

/// A source model.
pub struct MsModel(SourceModel);
/// A joint photon-number distribution.
pub struct MsProbMatrix(ProbMatrix);
/// A matrix of event counts.
pub struct MsCounts(CountMatrix);
/// The outcome of a reconstruction.
pub struct MsReconstruction(Reconstruction);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MsStatus {
    match e {
        Error::Domain(_) => MsStatus::Domain,
        Error::Contract(_) => MsStatus::Contract,
        Error::Parse { .. } | Error::Json(_) => MsStatus::Parse,
        Error::Io(_) => MsStatus::Io,
    }
}

struct Fail(MsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type Outcome = Result<(), Fail>;

fn guard(f: impl FnOnce() -> Outcome) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|e| Fail(MsStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s).map(CString::into_raw).map_err(|e| Fail(MsStatus::Parse, e.to_string()))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Empty model with photon numbers truncated at `n_max`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_model_new(n_max: usize, out: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        *out_ptr(out, "out")? = boxed(MsModel(SourceModel::vacuum(n_max)));
        Ok(())
    })
}

/// Appends a mode. Transmittances are ignored for single-arm modes.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_model_add_mode(
    model: *mut MsModel,
    mode_type: MsModeType,
    occupancy: MsOccupancy,
    mu: f64,
    eta_s: f64,
    eta_i: f64,
) -> MsStatus {
    guard(|| {
        let m = out_ptr(model, "model")?;
        let t = match mode_type {
            MsModeType::Thermal => ModeType::Thermal,
            MsModeType::Poissonian => ModeType::Poissonian,
            MsModeType::SinglePhoton => ModeType::SinglePhoton,
        };
        let spec = match occupancy {
            MsOccupancy::Conjugated => ModeSpec::conjugated(t, mu, eta_s, eta_i),
            MsOccupancy::Signal => ModeSpec::signal(t, mu),
            MsOccupancy::Idler => ModeSpec::idler(t, mu),
        };
        spec.validate()?;
        m.0.modes.push(spec);
        m.0.canonicalize();
        Ok(())
    })
}

/// Parses a model in the JSON model-file format.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_model_from_json(json: *const c_char, out: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(MsModel(io::parse_model(text)?));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_model_to_json(model: *const MsModel, out: *mut *mut c_char) -> MsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = out_ptr(out, "out")?;
        *out = to_c_string(io::to_json(&m.0)?)?;
        Ok(())
    })
}

/// Number of modes, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ms_model_mode_count(model: *const MsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.modes.len())
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_model_free(model: *mut MsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Joint photon-number distribution of a model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_full_jpd(model: *const MsModel, out: *mut *mut MsProbMatrix) -> MsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(MsProbMatrix(full_jpd(&m.0)?));
        Ok(())
    })
}

/// Side length `n_max + 1`, or 0 for a null handle.
///
/// # Safety
/// `jpd` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ms_prob_matrix_dim(jpd: *const MsProbMatrix) -> usize {
    jpd.as_ref().map_or(0, |p| p.0.dim())
}

/// Probability outside the window, or NaN for a null handle.
///
/// # Safety
/// `jpd` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ms_prob_matrix_tail_mass(jpd: *const MsProbMatrix) -> f64 {
    jpd.as_ref().map_or(f64::NAN, |p| p.0.tail_mass())
}

/// Copies the row-major entries (row = signal photon number) into `buf`,
/// which must hold `dim * dim` values.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_prob_matrix_copy(jpd: *const MsProbMatrix, buf: *mut f64, len: usize) -> MsStatus {
    guard(|| {
        let p = deref(jpd, "jpd")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let entries = p.0.entries();
        if len < entries.len() {
            return Err(Fail(MsStatus::Contract, format!("buffer holds {len} values, {} needed", entries.len())));
        }
        std::slice::from_raw_parts_mut(buf, entries.len()).copy_from_slice(entries);
        Ok(())
    })
}

/// # Safety
/// `jpd` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_prob_matrix_free(jpd: *mut MsProbMatrix) {
    if !jpd.is_null() {
        drop(Box::from_raw(jpd));
    }
}

/// Draws `n_tot` trials from `jpd`; trials outside the window count only
/// towards the total.
///
/// # Safety
/// `jpd` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_sample_counts(
    jpd: *const MsProbMatrix,
    n_tot: u64,
    seed: u64,
    out: *mut *mut MsCounts,
) -> MsStatus {
    guard(|| {
        let p = deref(jpd, "jpd")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(MsCounts(sample_counts(&p.0, n_tot, seed)?));
        Ok(())
    })
}

/// Wraps `(n_max + 1)^2` row-major counts taken from `n_tot` trials.
///
/// # Safety
/// `cells` must point to `len` readable values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_counts_new(
    n_max: usize,
    cells: *const u64,
    len: usize,
    n_tot: u64,
    out: *mut *mut MsCounts,
) -> MsStatus {
    guard(|| {
        if cells.is_null() {
            return Err(null("cells"));
        }
        let out = out_ptr(out, "out")?;
        let v = std::slice::from_raw_parts(cells, len).to_vec();
        *out = boxed(MsCounts(CountMatrix::new(n_max, v, n_tot)?));
        Ok(())
    })
}

/// Side length, or 0 for a null handle.
///
/// # Safety
/// `counts` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ms_counts_dim(counts: *const MsCounts) -> usize {
    counts.as_ref().map_or(0, |c| c.0.dim())
}

/// Number of trials, or 0 for a null handle.
///
/// # Safety
/// `counts` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ms_counts_n_tot(counts: *const MsCounts) -> u64 {
    counts.as_ref().map_or(0, |c| c.0.n_tot())
}

/// # Safety
/// `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ms_counts_copy(counts: *const MsCounts, buf: *mut u64, len: usize) -> MsStatus {
    guard(|| {
        let c = deref(counts, "counts")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let cells = c.0.counts();
        if len < cells.len() {
            return Err(Fail(MsStatus::Contract, format!("buffer holds {len} values, {} needed", cells.len())));
        }
        std::slice::from_raw_parts_mut(buf, cells.len()).copy_from_slice(cells);
        Ok(())
    })
}

/// # Safety
/// `counts` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_counts_free(counts: *mut MsCounts) {
    if !counts.is_null() {
        drop(Box::from_raw(counts));
    }
}

/// Hillery sums of a distribution normalized over its window.
///
/// # Safety
/// `jpd` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_hillery(jpd: *const MsProbMatrix, out: *mut MsHillery) -> MsStatus {
    guard(|| {
        let p = deref(jpd, "jpd")?;
        let out = out_ptr(out, "out")?;
        let h = hillery(&p.0.conditional());
        *out = MsHillery {
            even_sum: h.even_sum,
            odd_sum: h.odd_sum,
            vacuum: h.vacuum,
            tail_mass: p.0.tail_mass(),
            even_sigma: f64::NAN,
            odd_sigma: f64::NAN,
        };
        Ok(())
    })
}

/// Hillery sums of counts with binomial uncertainties.
///
/// # Safety
/// `counts` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_hillery_counts(counts: *const MsCounts, out: *mut MsHillery) -> MsStatus {
    guard(|| {
        let c = deref(counts, "counts")?;
        let out = out_ptr(out, "out")?;
        let h = hillery_counts(&c.0);
        *out = MsHillery {
            even_sum: h.even_sum,
            odd_sum: h.odd_sum,
            vacuum: h.vacuum,
            tail_mass: c.0.overflow_fraction(),
            even_sigma: h.even_sigma.unwrap_or(f64::NAN),
            odd_sigma: h.odd_sigma.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Pearson test of counts against a model distribution. Returns
/// `MS_STATUS_UNDEFINED` when no degrees of freedom remain.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_pearson_pvalue(
    counts: *const MsCounts,
    jpd: *const MsProbMatrix,
    n_fit_params: usize,
    out: *mut MsPearson,
) -> MsStatus {
    guard(|| {
        let c = deref(counts, "counts")?;
        let p = deref(jpd, "jpd")?;
        let out = out_ptr(out, "out")?;
        let t = pearson_pvalue(&c.0, &p.0, n_fit_params)
            .ok_or_else(|| Fail(MsStatus::Undefined, "no degrees of freedom left".into()))?;
        *out = MsPearson { chi2: t.chi2, p_value: t.p_value, bins: t.bins, dof: t.dof };
        Ok(())
    })
}

/// Full reconstruction. `config_json` may be null for the defaults.
///
/// # Safety
/// `counts` must be a live handle, `config_json` null or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_reconstruct(
    counts: *const MsCounts,
    config_json: *const c_char,
    out: *mut *mut MsReconstruction,
) -> MsStatus {
    guard(|| {
        let c = deref(counts, "counts")?;
        let out = out_ptr(out, "out")?;
        let config = if config_json.is_null() {
            ReconstructionConfig::default()
        } else {
            io::parse_config(read_str(config_json, "config_json")?)?
        };
        *out = boxed(MsReconstruction(reconstruct(&c.0, &config)?));
        Ok(())
    })
}

/// 1 when every stage succeeded, 0 when some failed, -1 for a null handle.
///
/// # Safety
/// `rec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ms_reconstruction_complete(rec: *const MsReconstruction) -> i32 {
    match rec.as_ref() {
        Some(r) => (r.0.report.status == RunStatus::Complete) as i32,
        None => -1,
    }
}

/// The reconstructed model as a new handle.
///
/// # Safety
/// `rec` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_reconstruction_model(rec: *const MsReconstruction, out: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        let r = deref(rec, "rec")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(MsModel(r.0.report.model.clone()));
        Ok(())
    })
}

/// The report as JSON.
///
/// # Safety
/// `rec` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_reconstruction_report_json(rec: *const MsReconstruction, out: *mut *mut c_char) -> MsStatus {
    guard(|| {
        let r = deref(rec, "rec")?;
        let out = out_ptr(out, "out")?;
        *out = to_c_string(io::to_json(&r.0.report)?)?;
        Ok(())
    })
}

/// # Safety
/// `rec` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_reconstruction_free(rec: *mut MsReconstruction) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}
