//! C ABI for the smoothing/filtering library: opaque handles, status codes,
//! and copy-out accessors, so other languages can bind without touching Rust
//! types. The generated header lives at include/varmap.h.

use std::panic::{catch_unwind, AssertUnwindSafe};

use varmap::config::ExperimentConfig;
use varmap::dynamics::{BilinearSystem, Integrator};
use varmap::error::Error;
use varmap::init_est::Scenario;
use varmap::map_solver::{smooth, EstimateReport, HessianMode, SmoothingProblem};
use varmap::observation::{generate, ObservationRecord, ObservationSetup};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidDimension = 2,
    OutOfBall = 3,
    NumericalError = 4,
    DegenerateInput = 5,
    InsufficientData = 6,
    ConfigurationError = 7,
    NoConvergence = 8,
    OptimizationFailure = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

fn status_of(e: &Error) -> VmStatus {
    match e {
        Error::InvalidDimension(_) => VmStatus::InvalidDimension,
        Error::OutOfBall { .. } => VmStatus::OutOfBall,
        Error::DegenerateInput(_) => VmStatus::DegenerateInput,
        Error::InsufficientData(_) => VmStatus::InsufficientData,
        Error::Configuration(_) => VmStatus::ConfigurationError,
        Error::OptimizationFailure(_) | Error::InitializationFailure(_) => {
            VmStatus::OptimizationFailure
        }
        _ => VmStatus::NumericalError,
    }
}

/// Observation scenario selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmScenario {
    HalfBlocks = 0,
    First3 = 1,
    FullState = 2,
}

/// Hessian mode selector (Auto picks dense below 64 dimensions).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmHessian {
    Auto = 0,
    Dense = 1,
    MatrixFree = 2,
}

/// Opaque dynamical system handle.
pub struct VmSystem {
    sys: BilinearSystem,
}

/// Opaque observation-record handle; carries the geometry it was generated
/// with so a smoothing call needs no further setup.
pub struct VmRecord {
    record: ObservationRecord,
    scenario: VmScenario,
    sigma_z: f64,
    h: f64,
    k: usize,
}

/// Opaque smoothing-report handle.
pub struct VmReport {
    report: EstimateReport,
}

/// Human-readable description of a status code (static storage).
#[no_mangle]
pub extern "C" fn vm_status_message(status: VmStatus) -> *const std::os::raw::c_char {
    let msg: &'static [u8] = match status {
        VmStatus::Ok => b"ok\0",
        VmStatus::NullPointer => b"null pointer argument\0",
        VmStatus::InvalidDimension => b"invalid dimension\0",
        VmStatus::OutOfBall => b"point outside the trapping ball\0",
        VmStatus::NumericalError => b"numerical error\0",
        VmStatus::DegenerateInput => b"degenerate input\0",
        VmStatus::InsufficientData => b"insufficient data\0",
        VmStatus::ConfigurationError => b"configuration error\0",
        VmStatus::NoConvergence => b"newton did not converge\0",
        VmStatus::OptimizationFailure => b"optimization failure\0",
        VmStatus::BufferTooSmall => b"destination buffer too small\0",
        VmStatus::Panic => b"internal panic\0",
    };
    msg.as_ptr() as *const std::os::raw::c_char
}

/// Create a Lorenz 96' system with the given dimension and forcing.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_system_lorenz96(
    dim: usize,
    forcing: f64,
    out: *mut *mut VmSystem,
) -> VmStatus {
    if out.is_null() {
        return VmStatus::NullPointer;
    }
    match catch_unwind(|| BilinearSystem::lorenz96(dim, forcing)) {
        Ok(Ok(sys)) => {
            *out = Box::into_raw(Box::new(VmSystem { sys }));
            VmStatus::Ok
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => VmStatus::Panic,
    }
}

/// # Safety
/// `sys` must be a pointer returned by a vm_system constructor, or null.
#[no_mangle]
pub unsafe extern "C" fn vm_system_free(sys: *mut VmSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` must be a valid system handle.
#[no_mangle]
pub unsafe extern "C" fn vm_system_dim(sys: *const VmSystem) -> usize {
    if sys.is_null() {
        return 0;
    }
    (*sys).sys.dim()
}

/// # Safety
/// `sys` must be a valid system handle.
#[no_mangle]
pub unsafe extern "C" fn vm_system_radius(sys: *const VmSystem) -> f64 {
    if sys.is_null() {
        return f64::NAN;
    }
    (*sys).sys.radius()
}

fn build_setup(
    sys: &BilinearSystem,
    scenario: VmScenario,
    sigma_z: f64,
    h: f64,
    k: usize,
) -> Result<ObservationSetup, Error> {
    let op = match scenario {
        VmScenario::HalfBlocks => varmap::observation::scenario_half_blocks(sys.dim())?,
        VmScenario::First3 => varmap::observation::scenario_first3(sys.dim())?,
        VmScenario::FullState => varmap::observation::ObsOperator::identity(sys.dim()),
    };
    ObservationSetup::new(op, sigma_z, h, k)
}

/// Generate k+1 noisy observations of the system started at `u0`
/// (null for the standard ramp initial condition), deterministic in `seed`.
///
/// # Safety
/// `sys` must be a valid system handle; `u0` is either null or a pointer to
/// `dim` doubles; `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_observations_generate(
    sys: *const VmSystem,
    scenario: VmScenario,
    sigma_z: f64,
    h: f64,
    k: usize,
    u0: *const f64,
    seed: u64,
    out: *mut *mut VmRecord,
) -> VmStatus {
    if sys.is_null() || out.is_null() {
        return VmStatus::NullPointer;
    }
    let sys = &(*sys).sys;
    let initial: Vec<f64> = if u0.is_null() {
        let d = sys.dim() as f64;
        (1..=sys.dim()).map(|i| (d + i as f64) / (2.0 * d)).collect()
    } else {
        std::slice::from_raw_parts(u0, sys.dim()).to_vec()
    };
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<ObservationRecord, Error> {
        let setup = build_setup(sys, scenario, sigma_z, h, k)?;
        let integ = Integrator::default_for(sys, h);
        generate(sys, &setup, &initial, seed, integ)
    }));
    match result {
        Ok(Ok(record)) => {
            *out = Box::into_raw(Box::new(VmRecord { record, scenario, sigma_z, h, k }));
            VmStatus::Ok
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => VmStatus::Panic,
    }
}

/// # Safety
/// `rec` must be a record handle or null.
#[no_mangle]
pub unsafe extern "C" fn vm_record_free(rec: *mut VmRecord) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Number of observation rows (k + 1).
///
/// # Safety
/// `rec` must be a valid record handle.
#[no_mangle]
pub unsafe extern "C" fn vm_record_rows(rec: *const VmRecord) -> usize {
    if rec.is_null() {
        return 0;
    }
    (*rec).record.rows()
}

/// Observed dimension d_o.
///
/// # Safety
/// `rec` must be a valid record handle.
#[no_mangle]
pub unsafe extern "C" fn vm_record_dim_obs(rec: *const VmRecord) -> usize {
    if rec.is_null() {
        return 0;
    }
    (*rec).record.y.first().map(|r| r.len()).unwrap_or(0)
}

/// Copy observation row `i` into `buf` (length `len >= d_o`).
///
/// # Safety
/// `rec` must be a valid record handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vm_record_copy_row(
    rec: *const VmRecord,
    i: usize,
    buf: *mut f64,
    len: usize,
) -> VmStatus {
    if rec.is_null() || buf.is_null() {
        return VmStatus::NullPointer;
    }
    let rec = &*rec;
    let Some(row) = rec.record.y.get(i) else {
        return VmStatus::ConfigurationError;
    };
    if len < row.len() {
        return VmStatus::BufferTooSmall;
    }
    std::slice::from_raw_parts_mut(buf, row.len()).copy_from_slice(row);
    VmStatus::Ok
}

/// Run the optimisation-based smoother on a record; on success returns a
/// report handle carrying the initial estimate, the MAP, and the push-forward
/// filter estimate.
///
/// # Safety
/// `sys` and `rec` must be valid handles; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_smooth(
    sys: *const VmSystem,
    rec: *const VmRecord,
    hessian: VmHessian,
    out: *mut *mut VmReport,
) -> VmStatus {
    if sys.is_null() || rec.is_null() || out.is_null() {
        return VmStatus::NullPointer;
    }
    let sys = &(*sys).sys;
    let rec = &*rec;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<EstimateReport, Error> {
        let setup = build_setup(sys, rec.scenario, rec.sigma_z, rec.h, rec.k)?;
        let integ = Integrator::default_for(sys, rec.h);
        let problem = SmoothingProblem::new(sys, setup, rec.record.clone(), integ)?;
        let scenario = match rec.scenario {
            VmScenario::HalfBlocks => Scenario::HalfBlocks,
            VmScenario::First3 => Scenario::First3,
            VmScenario::FullState => Scenario::Generic,
        };
        let cfg = ExperimentConfig::default();
        let mut opts = {
            let mut base = cfg.build_smooth_options(sys);
            base.scenario = scenario;
            base
        };
        if rec.scenario == VmScenario::FullState {
            opts.generic_depth = 0;
        }
        opts.newton.mode = match hessian {
            VmHessian::Auto => varmap::map_solver::auto_hessian_mode(sys.dim()),
            VmHessian::Dense => HessianMode::DenseFd,
            VmHessian::MatrixFree => HessianMode::MatrixFreeGaussNewtonCg,
        };
        smooth(&problem, &opts)
    }));
    match result {
        Ok(Ok(report)) => {
            let converged = report.trace.converged;
            *out = Box::into_raw(Box::new(VmReport { report }));
            if converged {
                VmStatus::Ok
            } else {
                VmStatus::NoConvergence
            }
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => VmStatus::Panic,
    }
}

/// # Safety
/// `rep` must be a report handle or null.
#[no_mangle]
pub unsafe extern "C" fn vm_report_free(rep: *mut VmReport) {
    if !rep.is_null() {
        drop(Box::from_raw(rep));
    }
}

/// # Safety
/// `rep` must be a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn vm_report_dim(rep: *const VmReport) -> usize {
    if rep.is_null() {
        return 0;
    }
    (*rep).report.u_map.len()
}

/// Newton iterations performed.
///
/// # Safety
/// `rep` must be a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn vm_report_iterations(rep: *const VmReport) -> usize {
    if rep.is_null() {
        return 0;
    }
    (*rep).report.trace.iterations()
}

/// 1 when the Newton iteration converged, 0 otherwise.
///
/// # Safety
/// `rep` must be a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn vm_report_converged(rep: *const VmReport) -> i32 {
    if rep.is_null() {
        return 0;
    }
    (*rep).report.trace.converged as i32
}

/// RMSE against the stored truth; NaN when no truth was kept.
///
/// # Safety
/// `rep` must be a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn vm_report_rmse(rep: *const VmReport) -> f64 {
    if rep.is_null() {
        return f64::NAN;
    }
    (*rep).report.rmse_vs_truth.unwrap_or(f64::NAN)
}

/// Which estimate vector to copy out of a report.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmEstimate {
    InitialPoint = 0,
    SmootherMap = 1,
    FilterEstimate = 2,
}

/// Copy an estimate vector into `buf` (length `len >= dim`).
///
/// # Safety
/// `rep` must be a valid report handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vm_report_copy(
    rep: *const VmReport,
    which: VmEstimate,
    buf: *mut f64,
    len: usize,
) -> VmStatus {
    if rep.is_null() || buf.is_null() {
        return VmStatus::NullPointer;
    }
    let rep = &*rep;
    let src = match which {
        VmEstimate::InitialPoint => &rep.report.x0,
        VmEstimate::SmootherMap => &rep.report.u_map,
        VmEstimate::FilterEstimate => &rep.report.u_filter,
    };
    if len < src.len() {
        return VmStatus::BufferTooSmall;
    }
    std::slice::from_raw_parts_mut(buf, src.len()).copy_from_slice(src);
    VmStatus::Ok
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_through_the_c_abi() {
        unsafe {
            let mut sys: *mut VmSystem = std::ptr::null_mut();
            assert_eq!(vm_system_lorenz96(12, 8.0, &mut sys), VmStatus::Ok);
            assert_eq!(vm_system_dim(sys), 12);
            assert!((vm_system_radius(sys) - 8.0 * 12f64.sqrt()).abs() < 1e-12);

            let mut rec: *mut VmRecord = std::ptr::null_mut();
            let st = vm_observations_generate(
                sys,
                VmScenario::HalfBlocks,
                1e-3,
                1e-2,
                20,
                std::ptr::null(),
                42,
                &mut rec,
            );
            assert_eq!(st, VmStatus::Ok);
            assert_eq!(vm_record_rows(rec), 21);
            assert_eq!(vm_record_dim_obs(rec), 6);
            let mut row = vec![0.0; 6];
            assert_eq!(vm_record_copy_row(rec, 0, row.as_mut_ptr(), 6), VmStatus::Ok);
            assert!(row.iter().all(|x| x.is_finite()));

            let mut rep: *mut VmReport = std::ptr::null_mut();
            assert_eq!(vm_smooth(sys, rec, VmHessian::Auto, &mut rep), VmStatus::Ok);
            assert_eq!(vm_report_converged(rep), 1);
            assert!(vm_report_iterations(rep) <= 10);
            let mut map = vec![0.0; 12];
            assert_eq!(
                vm_report_copy(rep, VmEstimate::SmootherMap, map.as_mut_ptr(), 12),
                VmStatus::Ok
            );
            let rmse = vm_report_rmse(rep);
            assert!(rmse.is_finite() && rmse < 0.1, "rmse {rmse}");

            vm_report_free(rep);
            vm_record_free(rec);
            vm_system_free(sys);
        }
    }

    #[test]
    fn status_codes_cover_error_paths() {
        unsafe {
            let mut sys: *mut VmSystem = std::ptr::null_mut();
            assert_eq!(vm_system_lorenz96(3, 8.0, &mut sys), VmStatus::InvalidDimension);
            assert_eq!(
                vm_system_lorenz96(12, 8.0, std::ptr::null_mut()),
                VmStatus::NullPointer
            );
            assert_eq!(vm_system_lorenz96(12, 8.0, &mut sys), VmStatus::Ok);
            // half-blocks needs d divisible by 6
            let mut sys10: *mut VmSystem = std::ptr::null_mut();
            assert_eq!(vm_system_lorenz96(10, 8.0, &mut sys10), VmStatus::Ok);
            let mut rec: *mut VmRecord = std::ptr::null_mut();
            assert_eq!(
                vm_observations_generate(
                    sys10,
                    VmScenario::HalfBlocks,
                    1e-3,
                    1e-2,
                    10,
                    std::ptr::null(),
                    1,
                    &mut rec
                ),
                VmStatus::InvalidDimension
            );
            // buffer too small
            assert_eq!(
                vm_observations_generate(
                    sys,
                    VmScenario::HalfBlocks,
                    1e-3,
                    1e-2,
                    10,
                    std::ptr::null(),
                    1,
                    &mut rec
                ),
                VmStatus::Ok
            );
            let mut tiny = [0.0; 2];
            assert_eq!(
                vm_record_copy_row(rec, 0, tiny.as_mut_ptr(), 2),
                VmStatus::BufferTooSmall
            );
            let msg = std::ffi::CStr::from_ptr(vm_status_message(VmStatus::BufferTooSmall));
            assert_eq!(msg.to_str().unwrap(), "destination buffer too small");
            vm_record_free(rec);
            vm_system_free(sys);
            vm_system_free(sys10);
        }
    }

    #[test]
    fn header_is_generated() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("include")
            .join("varmap.h");
        let text = std::fs::read_to_string(header).expect("cbindgen header exists");
        for sym in [
            "vm_system_lorenz96",
            "vm_observations_generate",
            "vm_smooth",
            "vm_report_copy",
            "VmStatus",
        ] {
            assert!(text.contains(sym), "header misses {sym}");
        }
    }
}
