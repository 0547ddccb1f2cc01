//! C ABI over the simulator.
//!
//! Plans are opaque handles created by `mts_plan_from_json` and released with
//! `mts_plan_free`. Every call returns an `MtsStatus`; on failure
//! `mts_last_error` describes what went wrong on the calling thread. Strings
//! handed out by the library must be released with `mts_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use mts_core::harness::fuzz::{verify_isolation, FuzzConfig};
use mts_core::harness::golden::golden_chain_check;
use mts_core::harness::scenario::{run_scenario, Scenario, ScenarioKind, DEFAULT_PACKET_SIZE};
use mts_core::ids::ComponentId;
use mts_core::orchestrator::{count_vfs, plan_from_json, DeploymentPlan, DeploymentSpec};
use mts_core::secmodel::{compromise, security_mechanisms};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidSpec = 3,
    InvalidArgument = 4,
    SimulationFailed = 5,
    Panic = 6,
}

/// Opaque deployment plan.
pub struct MtsPlan {
    plan: DeploymentPlan,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl ToString) {
    let c = CString::new(msg.to_string().replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MtsStatus, String);

fn fail<T>(status: MtsStatus, msg: impl ToString) -> Result<T, Failure> {
    Err(Failure(status, msg.to_string()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MtsStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(MtsStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(MtsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn plan_ref<'a>(p: *const MtsPlan) -> Result<&'a DeploymentPlan, Failure> {
    if p.is_null() {
        return fail(MtsStatus::NullArgument, "plan is null");
    }
    Ok(&(*p).plan)
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(MtsStatus::NullArgument, "output pointer is null");
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).or_else(|_| fail(MtsStatus::SimulationFailed, "output contains a nul byte"))?;
    if out.is_null() {
        return fail(MtsStatus::NullArgument, "output pointer is null");
    }
    out.write(c.into_raw());
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn mts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Plans a deployment from spec JSON.
///
/// # Safety
/// `spec_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mts_plan_from_json(spec_json: *const c_char, out: *mut *mut MtsPlan) -> MtsStatus {
    guard(|| {
        let json = text(spec_json, "spec_json")?;
        let plan = plan_from_json(json).or_else(|e| fail(MtsStatus::InvalidSpec, e))?;
        put(out, Box::into_raw(Box::new(MtsPlan { plan })))
    })
}

/// # Safety
/// `plan` must be null or a handle from `mts_plan_from_json`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mts_plan_free(plan: *mut MtsPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// # Safety
/// `plan` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mts_plan_to_json(plan: *const MtsPlan, out: *mut *mut c_char) -> MtsStatus {
    guard(|| put_string(out, plan_ref(plan)?.to_json()))
}

/// VFs the spec needs on the NIC.
///
/// # Safety
/// `spec_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mts_count_vfs(spec_json: *const c_char, out: *mut usize) -> MtsStatus {
    guard(|| {
        let spec = DeploymentSpec::from_json(text(spec_json, "spec_json")?).or_else(|e| fail(MtsStatus::InvalidSpec, e))?;
        let n = count_vfs(&spec).or_else(|e| fail(MtsStatus::InvalidSpec, e))?;
        put(out, n)
    })
}

/// Runs `p2p`, `p2v` or `v2v` with 64-byte packets and writes the metrics
/// JSON to `out`.
///
/// # Safety
/// `plan` must be a live handle, `scenario` a nul-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mts_run_scenario(
    plan: *const MtsPlan,
    scenario: *const c_char,
    packets: u64,
    seed: u64,
    out: *mut *mut c_char,
) -> MtsStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let kind: ScenarioKind = text(scenario, "scenario")?
            .parse()
            .or_else(|e| fail(MtsStatus::InvalidArgument, e))?;
        let sc = Scenario::standard(plan, kind, packets, DEFAULT_PACKET_SIZE, seed)
            .or_else(|e| fail(MtsStatus::InvalidArgument, e))?;
        let result = run_scenario(plan, &sc).or_else(|e| fail(MtsStatus::SimulationFailed, e))?;
        put_string(out, result.metrics.to_json())
    })
}

/// Fuzzes every tenant VF with `frames` frames. `violations` receives the
/// violation count; `report` may be null, otherwise it receives the report
/// JSON.
///
/// # Safety
/// `plan` must be a live handle, `violations` writable and `report` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mts_verify_isolation(
    plan: *const MtsPlan,
    frames: u32,
    seed: u64,
    violations: *mut u64,
    report: *mut *mut c_char,
) -> MtsStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let r = verify_isolation(plan, FuzzConfig { frames_per_vf: frames, seed })
            .or_else(|e| fail(MtsStatus::SimulationFailed, e))?;
        put(violations, r.violation_count)?;
        if !report.is_null() {
            put_string(report, r.to_json())?;
        }
        Ok(())
    })
}

/// Sets `passed` to 1 if the plan forwards along the golden path, else 0.
///
/// # Safety
/// `plan` must be a live handle; `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mts_golden_check(plan: *const MtsPlan, passed: *mut i32) -> MtsStatus {
    guard(|| {
        let r = golden_chain_check(plan_ref(plan)?).or_else(|e| fail(MtsStatus::InvalidArgument, e))?;
        put(passed, i32::from(r.passed))
    })
}

/// Attacker reach after compromising `component` (`host`, `vswitch:N` or
/// `vm:N`), as JSON.
///
/// # Safety
/// `plan` must be a live handle, `component` a nul-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mts_compromise(plan: *const MtsPlan, component: *const c_char, out: *mut *mut c_char) -> MtsStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let c: ComponentId = text(component, "component")?
            .parse()
            .or_else(|e| fail(MtsStatus::InvalidArgument, e))?;
        let report = compromise(plan, c).or_else(|e| fail(MtsStatus::InvalidArgument, e))?;
        put_string(out, serde_json::to_string(&report).expect("report serializes"))
    })
}

/// Number of security mechanisms between `tenant`'s vswitch and the host
/// kernel.
///
/// # Safety
/// `plan` must be a live handle, `tenant` a nul-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mts_security_mechanisms(plan: *const MtsPlan, tenant: *const c_char, out: *mut u32) -> MtsStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let set = security_mechanisms(plan, text(tenant, "tenant")?).or_else(|e| fail(MtsStatus::InvalidArgument, e))?;
        put(out, set.len() as u32)
    })
}
