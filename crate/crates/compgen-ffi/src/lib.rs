//! C ABI for the compgen laboratory: opaque handles over teachers and
//! compiled networks, status codes, and a thread-local last-error message.
//!
//! Ownership rules: every `*_generate` / `*_from_json` / `*_build` hands back
//! a pointer the caller must release with the matching `*_free`; strings
//! returned through `char**` must be released with `compgen_string_free`.
//! Handles are immutable after creation and safe to share across threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use compgen::construct::{build_hyperteacher_net, verify_with_seed, ConstructedNet};
use compgen::nn::forward;
use compgen::taskfam::{FamilyConfig, Hyperteacher, Mask, TaskConstituents};
use compgen::Error;
use ndarray::Array2;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompgenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidJson = 3,
    ShapeMismatch = 4,
    Infeasible = 5,
    NumericError = 6,
    IoError = 7,
    Utf8Error = 8,
    InternalError = 9,
}

/// Opaque teacher handle.
pub struct CompgenTeacher {
    inner: Hyperteacher,
}

/// Opaque compiled-network handle.
pub struct CompgenNet {
    inner: ConstructedNet,
}

/// Verification summary for a compiled network.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CompgenVerifyReport {
    pub samples: usize,
    pub sup_error: f64,
    pub mean_error: f64,
    pub neuron_count: usize,
    pub analytic_bound: f64,
}

/// Compilation metadata for a constructed network.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CompgenNetInfo {
    pub epsilon: f64,
    pub knots: usize,
    pub hidden_neurons: usize,
    pub analytic_bound: f64,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Family dimensions of a teacher handle.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CompgenTeacherInfo {
    pub module_count: usize,
    pub max_active: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub family_seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> CompgenStatus {
    match err {
        Error::Config(_) | Error::Empty(_) => CompgenStatus::InvalidArgument,
        Error::Shape(_) => CompgenStatus::ShapeMismatch,
        Error::Infeasible(_) | Error::BudgetExhausted(_) => CompgenStatus::Infeasible,
        Error::Singular(_) | Error::Degenerate(_) | Error::NonFinite(_) => {
            CompgenStatus::NumericError
        }
        Error::Io(_) => CompgenStatus::IoError,
        Error::Json(_) | Error::Format(_) | Error::Csv(_) => CompgenStatus::InvalidJson,
    }
}

fn fail(err: Error) -> CompgenStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be NULL (then only
/// the required length is returned).
#[no_mangle]
pub unsafe extern "C" fn compgen_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static library version string; do not free.
#[no_mangle]
pub extern "C" fn compgen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must have been returned through a `char**` out-parameter of this
/// library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn compgen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn read_cstr<'a>(ptr: *const c_char) -> Result<&'a str, CompgenStatus> {
    if ptr.is_null() {
        set_error("null string pointer");
        return Err(CompgenStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| {
        set_error(format!("invalid UTF-8: {e}"));
        CompgenStatus::Utf8Error
    })
}

fn export_string(s: String, out: *mut *mut c_char) -> CompgenStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CompgenStatus::Ok
        }
        Err(_) => {
            set_error("string contains interior NUL");
            CompgenStatus::InternalError
        }
    }
}

/// Generate a teacher from a family-config JSON document
/// (`{"module_count": .., "max_active": .., "input_dim": .., "hidden_dim": ..,
/// "output_dim": .., "magnitude_grid": [..], "family_seed": ..}`).
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn compgen_teacher_generate(
    config_json: *const c_char,
    out: *mut *mut CompgenTeacher,
) -> CompgenStatus {
    if out.is_null() {
        set_error("null out pointer");
        return CompgenStatus::NullPointer;
    }
    let json = match read_cstr(config_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let config: FamilyConfig = match serde_json::from_str(json) {
        Ok(c) => c,
        Err(e) => {
            set_error(format!("config JSON: {e}"));
            return CompgenStatus::InvalidJson;
        }
    };
    match compgen::taskfam::init_hyperteacher(&config) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(CompgenTeacher { inner: t }));
            CompgenStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a teacher from its JSON file contents.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn compgen_teacher_from_json(
    json: *const c_char,
    out: *mut *mut CompgenTeacher,
) -> CompgenStatus {
    if out.is_null() {
        set_error("null out pointer");
        return CompgenStatus::NullPointer;
    }
    let text = match read_cstr(json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match compgen::taskfam::teacher_from_json(text) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(CompgenTeacher { inner: t }));
            CompgenStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Serialize a teacher to JSON; release via `compgen_string_free`.
///
/// # Safety
/// `teacher` must be a live handle from this library; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn compgen_teacher_to_json(
    teacher: *const CompgenTeacher,
    out_json: *mut *mut c_char,
) -> CompgenStatus {
    if teacher.is_null() || out_json.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    match compgen::taskfam::teacher_to_json(&(*teacher).inner) {
        Ok(text) => export_string(text, out_json),
        Err(e) => fail(e),
    }
}

/// Family dimensions of a teacher.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn compgen_teacher_info(
    teacher: *const CompgenTeacher,
    out: *mut CompgenTeacherInfo,
) -> CompgenStatus {
    if teacher.is_null() || out.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    let c = &(*teacher).inner.config;
    *out = CompgenTeacherInfo {
        module_count: c.module_count,
        max_active: c.max_active,
        input_dim: c.input_dim,
        hidden_dim: c.hidden_dim,
        output_dim: c.output_dim,
        family_seed: c.family_seed,
    };
    CompgenStatus::Ok
}

/// Evaluate the composed task function. `magnitudes` has one entry per module
/// (zero = inactive, nonzero entries must sit on the family's magnitude grid)
/// and `out` receives `output_dim` values.
///
/// # Safety
/// `magnitudes`, `x` and `out` must point to buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn compgen_teacher_eval(
    teacher: *const CompgenTeacher,
    magnitudes: *const f64,
    magnitudes_len: usize,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> CompgenStatus {
    if teacher.is_null() || magnitudes.is_null() || x.is_null() || out.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    let t = &(*teacher).inner;
    let cfg = &t.config;
    if magnitudes_len != cfg.module_count || x_len != cfg.input_dim || out_len != cfg.output_dim {
        set_error(format!(
            "expected lengths ({}, {}, {}), got ({}, {}, {})",
            cfg.module_count, cfg.input_dim, cfg.output_dim, magnitudes_len, x_len, out_len
        ));
        return CompgenStatus::ShapeMismatch;
    }
    let mags: Vec<f64> = std::slice::from_raw_parts(magnitudes, magnitudes_len).to_vec();
    let active: Vec<usize> = mags
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    let z = TaskConstituents {
        mask: Mask::from_indices(cfg.module_count, &active),
        magnitudes: mags,
    };
    let input = ndarray::Array1::from_vec(std::slice::from_raw_parts(x, x_len).to_vec());
    match t.evaluate(&z, &input) {
        Ok(y) => {
            ptr::copy_nonoverlapping(y.as_ptr(), out, out_len);
            CompgenStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `teacher` must be a live handle; passing NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn compgen_teacher_free(teacher: *mut CompgenTeacher) {
    if !teacher.is_null() {
        drop(Box::from_raw(teacher));
    }
}

/// Compile a teacher into an explicit ReLU network meeting `epsilon` in the
/// sup norm.
///
/// # Safety
/// `teacher` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn compgen_construct_build(
    teacher: *const CompgenTeacher,
    epsilon: f64,
    out: *mut *mut CompgenNet,
) -> CompgenStatus {
    if teacher.is_null() || out.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    match build_hyperteacher_net(&(*teacher).inner, epsilon) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(CompgenNet { inner: net }));
            CompgenStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Compilation metadata.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn compgen_net_info(
    net: *const CompgenNet,
    out: *mut CompgenNetInfo,
) -> CompgenStatus {
    if net.is_null() || out.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    let n = &(*net).inner;
    *out = CompgenNetInfo {
        epsilon: n.epsilon,
        knots: n.knots,
        hidden_neurons: n.hidden_neurons(),
        analytic_bound: n.analytic_bound,
        input_dim: n.model.spec.input_dim(),
        output_dim: n.model.spec.output_dim(),
    };
    CompgenStatus::Ok
}

/// Forward one input through the compiled network. The input is the
/// concatenation of x (input_dim) and the magnitudes vector (module_count).
///
/// # Safety
/// `input` and `out` must point to buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn compgen_net_forward(
    net: *const CompgenNet,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> CompgenStatus {
    if net.is_null() || input.is_null() || out.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    let model = &(*net).inner.model;
    if input_len != model.spec.input_dim() || out_len != model.spec.output_dim() {
        set_error(format!(
            "expected lengths ({}, {}), got ({}, {})",
            model.spec.input_dim(),
            model.spec.output_dim(),
            input_len,
            out_len
        ));
        return CompgenStatus::ShapeMismatch;
    }
    let x = Array2::from_shape_vec(
        (1, input_len),
        std::slice::from_raw_parts(input, input_len).to_vec(),
    )
    .expect("shape checked");
    match forward(model, &x) {
        Ok((y, _)) => {
            ptr::copy_nonoverlapping(y.as_ptr(), out, out_len);
            CompgenStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Sample (z, x) pairs and report the sup/mean deviation from the teacher.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn compgen_net_verify(
    net: *const CompgenNet,
    teacher: *const CompgenTeacher,
    samples: usize,
    seed: u64,
    out: *mut CompgenVerifyReport,
) -> CompgenStatus {
    if net.is_null() || teacher.is_null() || out.is_null() {
        set_error("null pointer");
        return CompgenStatus::NullPointer;
    }
    match verify_with_seed(&(*net).inner, &(*teacher).inner, samples, seed) {
        Ok(report) => {
            *out = CompgenVerifyReport {
                samples: report.samples,
                sup_error: report.sup_error,
                mean_error: report.mean_error,
                neuron_count: report.neuron_count,
                analytic_bound: report.analytic_bound,
            };
            CompgenStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `net` must be a live handle; passing NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn compgen_net_free(net: *mut CompgenNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn config_json() -> CString {
        CString::new(
            r#"{"module_count": 3, "max_active": 2, "input_dim": 3,
                "hidden_dim": 4, "output_dim": 2, "family_seed": 11}"#,
        )
        .unwrap()
    }

    #[test]
    fn teacher_lifecycle_and_eval() {
        unsafe {
            let mut t: *mut CompgenTeacher = ptr::null_mut();
            assert_eq!(
                compgen_teacher_generate(config_json().as_ptr(), &mut t),
                CompgenStatus::Ok
            );
            let mut info = CompgenTeacherInfo {
                module_count: 0,
                max_active: 0,
                input_dim: 0,
                hidden_dim: 0,
                output_dim: 0,
                family_seed: 0,
            };
            assert_eq!(compgen_teacher_info(t, &mut info), CompgenStatus::Ok);
            assert_eq!(info.module_count, 3);
            assert_eq!(info.output_dim, 2);

            let mags = [1.0, 0.0, 0.5];
            let x = [0.3, -0.2, 0.9];
            let mut y = [0.0f64; 2];
            assert_eq!(
                compgen_teacher_eval(t, mags.as_ptr(), 3, x.as_ptr(), 3, y.as_mut_ptr(), 2),
                CompgenStatus::Ok
            );
            assert!(y.iter().all(|v| v.is_finite()));

            // Shape errors are reported, not fatal.
            assert_eq!(
                compgen_teacher_eval(t, mags.as_ptr(), 2, x.as_ptr(), 3, y.as_mut_ptr(), 2),
                CompgenStatus::ShapeMismatch
            );
            let mut buf = [0i8; 256];
            let len = compgen_last_error(buf.as_mut_ptr(), buf.len());
            assert!(len > 0);

            compgen_teacher_free(t);
        }
    }

    #[test]
    fn json_roundtrip_preserves_evaluation() {
        unsafe {
            let mut t: *mut CompgenTeacher = ptr::null_mut();
            assert_eq!(
                compgen_teacher_generate(config_json().as_ptr(), &mut t),
                CompgenStatus::Ok
            );
            let mut json: *mut c_char = ptr::null_mut();
            assert_eq!(compgen_teacher_to_json(t, &mut json), CompgenStatus::Ok);
            let mut t2: *mut CompgenTeacher = ptr::null_mut();
            assert_eq!(compgen_teacher_from_json(json, &mut t2), CompgenStatus::Ok);
            compgen_string_free(json);

            let mags = [0.0, 0.7, 0.0];
            let x = [0.1, 0.2, -0.5];
            let mut y1 = [0.0f64; 2];
            let mut y2 = [0.0f64; 2];
            assert_eq!(
                compgen_teacher_eval(t, mags.as_ptr(), 3, x.as_ptr(), 3, y1.as_mut_ptr(), 2),
                CompgenStatus::Ok
            );
            assert_eq!(
                compgen_teacher_eval(t2, mags.as_ptr(), 3, x.as_ptr(), 3, y2.as_mut_ptr(), 2),
                CompgenStatus::Ok
            );
            assert_eq!(y1, y2);
            compgen_teacher_free(t);
            compgen_teacher_free(t2);
        }
    }

    #[test]
    fn construct_verify_and_forward() {
        unsafe {
            let mut t: *mut CompgenTeacher = ptr::null_mut();
            assert_eq!(
                compgen_teacher_generate(config_json().as_ptr(), &mut t),
                CompgenStatus::Ok
            );
            let mut net: *mut CompgenNet = ptr::null_mut();
            assert_eq!(compgen_construct_build(t, 0.25, &mut net), CompgenStatus::Ok);

            let mut info = CompgenNetInfo {
                epsilon: 0.0,
                knots: 0,
                hidden_neurons: 0,
                analytic_bound: 0.0,
                input_dim: 0,
                output_dim: 0,
            };
            assert_eq!(compgen_net_info(net, &mut info), CompgenStatus::Ok);
            assert_eq!(info.input_dim, 3 + 3);
            assert!(info.analytic_bound <= 0.25);

            let mut report = CompgenVerifyReport {
                samples: 0,
                sup_error: 0.0,
                mean_error: 0.0,
                neuron_count: 0,
                analytic_bound: 0.0,
            };
            assert_eq!(
                compgen_net_verify(net, t, 500, 7, &mut report),
                CompgenStatus::Ok
            );
            assert!(report.sup_error <= 0.25);

            // Forward agrees with teacher eval within the bound.
            let input = [0.2, -0.3, 0.4, 1.0, 0.0, 0.0];
            let mut y_net = [0.0f64; 2];
            assert_eq!(
                compgen_net_forward(net, input.as_ptr(), 6, y_net.as_mut_ptr(), 2),
                CompgenStatus::Ok
            );
            let mags = [1.0, 0.0, 0.0];
            let x = [0.2, -0.3, 0.4];
            let mut y_teacher = [0.0f64; 2];
            assert_eq!(
                compgen_teacher_eval(t, mags.as_ptr(), 3, x.as_ptr(), 3, y_teacher.as_mut_ptr(), 2),
                CompgenStatus::Ok
            );
            for (a, b) in y_net.iter().zip(&y_teacher) {
                assert!((a - b).abs() <= 0.25);
            }

            compgen_net_free(net);
            compgen_teacher_free(t);

            // Null handling.
            assert_eq!(
                compgen_construct_build(ptr::null(), 0.1, &mut net),
                CompgenStatus::NullPointer
            );
            compgen_net_free(ptr::null_mut());
        }
    }

    #[test]
    fn invalid_json_is_reported() {
        unsafe {
            let bad = CString::new("{not json").unwrap();
            let mut t: *mut CompgenTeacher = ptr::null_mut();
            assert_eq!(
                compgen_teacher_generate(bad.as_ptr(), &mut t),
                CompgenStatus::InvalidJson
            );
            assert!(t.is_null());

            let bad_cfg = CString::new(
                r#"{"module_count": 0, "max_active": 1, "input_dim": 1,
                    "hidden_dim": 1, "output_dim": 1, "family_seed": 0}"#,
            )
            .unwrap();
            assert_eq!(
                compgen_teacher_generate(bad_cfg.as_ptr(), &mut t),
                CompgenStatus::InvalidArgument
            );
        }
    }

    #[test]
    fn version_is_a_static_string() {
        unsafe {
            let v = CStr::from_ptr(compgen_version());
            assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        }
    }
}
