//! C ABI over the simulator.
//!
//! Objects are opaque handles created by `*_new`/`*_resolve`/`*_run` and
//! released with the matching `*_free`. Every fallible call returns an
//! [`FsStatus`]; on failure `fs_last_error_message` describes the error for
//! the calling thread. Strings are copied into caller buffers as
//! NUL-terminated UTF-8: pass a null buffer to learn the required size.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use falloutsim::aes::{expand_key, reverse_key_schedule, RoundKey, EXPANDED_KEY_BYTES, ROUNDS};
use falloutsim::covert::ProbeReading;
use falloutsim::pipeline::{Program, Simulator};
use falloutsim::profile::{resolve_profile, ArchProfile};
use falloutsim::scenarios::{self, ScenarioError, ScenarioName, ScenarioReport, ScenarioSpec};
use falloutsim::store_buffer::HwThread;
use falloutsim::victims::{self, layout};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad scenario, profile, override or program text.
    Usage = 3,
    /// The run finished but violated its configured contract.
    ContractViolation = 4,
    Simulation = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Microarchitecture profile.
pub struct FsProfile(ArchProfile);

/// One simulated core on the lab address space.
pub struct FsSimulator {
    sim: Simulator,
}

/// Result of a scenario run.
pub struct FsReport(ScenarioReport);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FsExecStats {
    pub faults_raised: u64,
    pub aborted_transactions: u64,
    /// µOP index of the fault that ended the program, or -1.
    pub terminated_at: i64,
    pub transient_windows: u64,
    pub registers: [u8; 16],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(FsStatus, String);

type FfiResult = Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FsStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| Failure(FsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `buf` must be null or valid for `len` bytes; `needed` null or writable.
unsafe fn copy_out(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> FfiResult {
    let size = text.len() + 1;
    if !needed.is_null() {
        *needed = size;
    }
    if buf.is_null() || len < size {
        return Err(Failure(FsStatus::BufferTooSmall, format!("buffer of {len} bytes, {size} needed")));
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

fn scenario_failure(e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Usage(m) => Failure(FsStatus::Usage, m),
        ScenarioError::Contract(m) => Failure(FsStatus::ContractViolation, m),
        other => Failure(FsStatus::Simulation, other.to_string()),
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Looks up a built-in profile name, a profile in `$FALLOUTSIM_PROFILE_DIR`,
/// or a profile file path.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_resolve(name: *const c_char, out: *mut *mut FsProfile) -> FsStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let profile = resolve_profile(name).map_err(|e| Failure(FsStatus::Usage, e.to_string()))?;
        *out = Box::into_raw(Box::new(FsProfile(profile)));
        Ok(())
    })
}

/// The profile in the `key = value` file format.
///
/// # Safety
/// `profile` must come from `fs_profile_resolve`; `buf` null or writable for
/// `len` bytes; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_to_config(
    profile: *const FsProfile,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FsStatus {
    guard(|| {
        let profile = profile.as_ref().ok_or_else(|| null("profile"))?;
        copy_out(&profile.0.to_config_string(), buf, len, needed)
    })
}

/// # Safety
/// `profile` must be null or come from `fs_profile_resolve`, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_profile_free(profile: *mut FsProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Runs a named scenario.
///
/// `profiles` may be null (scenario default) or an array of `n_profiles`
/// handles. `trials` 0 means the scenario default. `overrides` is null or
/// `key=value` pairs separated by `;` or newlines. A run that records
/// contract violations still hands back its report, with
/// `FS_STATUS_CONTRACT_VIOLATION`.
///
/// # Safety
/// Pointers must be valid as described; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fs_scenario_run(
    scenario: *const c_char,
    profiles: *const *const FsProfile,
    n_profiles: usize,
    seed: u64,
    trials: usize,
    overrides: *const c_char,
    out: *mut *mut FsReport,
) -> FsStatus {
    guard(|| {
        let name: ScenarioName = str_arg(scenario, "scenario")?.parse().map_err(|e: String| Failure(FsStatus::Usage, e))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut spec = ScenarioSpec::new(name).with_seed(seed);
        if !profiles.is_null() && n_profiles > 0 {
            let handles = std::slice::from_raw_parts(profiles, n_profiles);
            let mut list = Vec::with_capacity(n_profiles);
            for h in handles {
                list.push(h.as_ref().ok_or_else(|| null("profile handle"))?.0.clone());
            }
            spec = spec.with_profiles(list);
        }
        if trials > 0 {
            spec = spec.with_trials(trials);
        }
        if !overrides.is_null() {
            for pair in str_arg(overrides, "overrides")?.split([';', '\n']).map(str::trim).filter(|p| !p.is_empty()) {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| Failure(FsStatus::Usage, format!("override `{pair}` is not key=value")))?;
                spec = spec.with_override(k.trim(), v.trim());
            }
        }
        let report = scenarios::run(&spec).map_err(scenario_failure)?;
        let violations = report.violations.join("; ");
        *out = Box::into_raw(Box::new(FsReport(report)));
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Failure(FsStatus::ContractViolation, violations))
        }
    })
}

/// # Safety
/// `report` from `fs_scenario_run`; buffer rules as for `fs_profile_to_config`.
#[no_mangle]
pub unsafe extern "C" fn fs_report_csv(report: *const FsReport, buf: *mut c_char, len: usize, needed: *mut usize) -> FsStatus {
    guard(|| copy_out(&report.as_ref().ok_or_else(|| null("report"))?.0.to_csv(), buf, len, needed))
}

/// # Safety
/// As for `fs_report_csv`.
#[no_mangle]
pub unsafe extern "C" fn fs_report_json(report: *const FsReport, buf: *mut c_char, len: usize, needed: *mut usize) -> FsStatus {
    guard(|| copy_out(&report.as_ref().ok_or_else(|| null("report"))?.0.to_json(), buf, len, needed))
}

/// One summary value by key, e.g. `recovered`.
///
/// # Safety
/// As for `fs_report_csv`; `key` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fs_report_summary(
    report: *const FsReport,
    key: *const c_char,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FsStatus {
    guard(|| {
        let report = report.as_ref().ok_or_else(|| null("report"))?;
        let key = str_arg(key, "key")?;
        let value = report.0.summary_value(key).ok_or_else(|| Failure(FsStatus::Usage, format!("no summary key `{key}`")))?;
        copy_out(value, buf, len, needed)
    })
}

/// Contract violations the run recorded (0 for a conforming run, or for null).
///
/// # Safety
/// `report` null or from `fs_scenario_run`.
#[no_mangle]
pub unsafe extern "C" fn fs_report_violation_count(report: *const FsReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.violations.len())
}

/// # Safety
/// `report` null or from `fs_scenario_run`, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_report_free(report: *mut FsReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// A core with the lab address space. With `revoke_attacker`, the
/// attacker page starts out non-present.
///
/// # Safety
/// `profile` from `fs_profile_resolve`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_new(
    profile: *const FsProfile,
    seed: u64,
    revoke_attacker: bool,
    out: *mut *mut FsSimulator,
) -> FsStatus {
    guard(|| {
        let profile = profile.as_ref().ok_or_else(|| null("profile"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut space = victims::lab_space();
        if revoke_attacker {
            space.revoke(layout::ATTACKER_VPN).map_err(|e| Failure(FsStatus::Simulation, e.to_string()))?;
        }
        let sim = Simulator::new(profile.0.clone(), space).with_seed(seed);
        *out = Box::into_raw(Box::new(FsSimulator { sim }));
        Ok(())
    })
}

/// Flushes every probe-array line (the receiver's prime step).
///
/// # Safety
/// `sim` from `fs_simulator_new`.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_prime_probe(sim: *mut FsSimulator) -> FsStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        let (space, cache) = sim.sim.space_and_cache();
        victims::probe_array().prime(space, cache).map_err(|e| Failure(FsStatus::Simulation, e.to_string()))
    })
}

/// Runs µOP program text on hardware thread 0. Microarchitectural state
/// carries over between calls.
///
/// # Safety
/// `sim` from `fs_simulator_new`, `program` NUL-terminated, `stats` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_run(sim: *mut FsSimulator, program: *const c_char, stats: *mut FsExecStats) -> FsStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        let program = Program::parse(str_arg(program, "program")?).map_err(|e| Failure(FsStatus::Usage, e.to_string()))?;
        let s = sim.sim.run(&program, HwThread::T0).map_err(|e| Failure(FsStatus::Simulation, e.to_string()))?;
        if let Some(out) = stats.as_mut() {
            *out = FsExecStats {
                faults_raised: s.faults_raised as u64,
                aborted_transactions: s.aborted_transactions as u64,
                terminated_at: s.terminated_at.map_or(-1, |pc| pc as i64),
                transient_windows: s.windows.len() as u64,
                registers: s.registers,
            };
        }
        Ok(())
    })
}

/// Times a reload of all 256 probe slots into `latencies` and returns the
/// slot that hit if exactly one did, else -1, through `single_hit`.
///
/// # Safety
/// `sim` from `fs_simulator_new`; `latencies` null or 256 writable `uint64_t`;
/// `single_hit` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_read_probe(
    sim: *mut FsSimulator,
    threshold: u64,
    latencies: *mut u64,
    single_hit: *mut i32,
) -> FsStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        let (space, cache) = sim.sim.space_and_cache();
        let reading: ProbeReading = victims::probe_array()
            .decode(space, cache, threshold)
            .map_err(|e| Failure(FsStatus::Usage, e.to_string()))?;
        if !latencies.is_null() {
            ptr::copy_nonoverlapping(reading.latencies.as_ptr(), latencies, reading.latencies.len());
        }
        if let Some(out) = single_hit.as_mut() {
            *out = reading.single_hit().map_or(-1, i32::from);
        }
        Ok(())
    })
}

/// Drops buffered stores and cached lines; memory and page tables stay.
///
/// # Safety
/// `sim` from `fs_simulator_new`.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_reset_microarch(sim: *mut FsSimulator) -> FsStatus {
    guard(|| {
        sim.as_mut().ok_or_else(|| null("sim"))?.sim.reset_microarch();
        Ok(())
    })
}

/// # Safety
/// `sim` null or from `fs_simulator_new`, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_free(sim: *mut FsSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// AES-128 key expansion: 16 key bytes in, 176 schedule bytes out.
///
/// # Safety
/// `key` readable for 16 bytes, `out` writable for 176.
#[no_mangle]
pub unsafe extern "C" fn fs_aes_expand_key(key: *const u8, out: *mut u8) -> FsStatus {
    guard(|| {
        if key.is_null() || out.is_null() {
            return Err(null("key or out"));
        }
        let mut master = [0u8; 16];
        ptr::copy_nonoverlapping(key, master.as_mut_ptr(), 16);
        let bytes = expand_key(master).to_bytes();
        ptr::copy_nonoverlapping(bytes.as_ptr(), out, EXPANDED_KEY_BYTES);
        Ok(())
    })
}

/// Master key from the round-10 key. `rk9` may be null; when given it must
/// agree with the schedule.
///
/// # Safety
/// `rk10` readable for 16 bytes, `rk9` null or readable for 16, `out` writable for 16.
#[no_mangle]
pub unsafe extern "C" fn fs_aes_reverse_key_schedule(rk10: *const u8, rk9: *const u8, out: *mut u8) -> FsStatus {
    guard(|| {
        if rk10.is_null() || out.is_null() {
            return Err(null("rk10 or out"));
        }
        let read = |p: *const u8| {
            let mut b = [0u8; 16];
            ptr::copy_nonoverlapping(p, b.as_mut_ptr(), 16);
            b
        };
        let last = RoundKey::new(read(rk10), ROUNDS);
        let ninth = (!rk9.is_null()).then(|| RoundKey::new(read(rk9), ROUNDS - 1));
        let master = reverse_key_schedule(&last, ninth.as_ref()).map_err(|e| Failure(FsStatus::Usage, e.to_string()))?;
        ptr::copy_nonoverlapping(master.as_ptr(), out, 16);
        Ok(())
    })
}
