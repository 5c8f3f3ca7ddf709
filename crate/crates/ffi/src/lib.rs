//! C ABI for the mtesim simulator.
//!
//! Programs and simulators are opaque handles created and destroyed through
//! this API. Every fallible call returns an [`MtesimStatus`]; on failure a
//! message is available from [`mtesim_last_error`] on the same thread until
//! the next call. Strings returned to the caller are freed with
//! [`mtesim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mtesim::sim::StepOutcome;
use mtesim::{parse_program, Mode, Program, SimConfig, Simulator};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtesimStatus {
    Ok = 0,
    /// The run ended with a bug report.
    Bug = 1,
    InvalidArgument = 2,
    ParseError = 3,
    SimError = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtesimMode {
    Off = 0,
    Async = 1,
    Sync = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtesimStep {
    Continue = 0,
    Halted = 1,
    BugReported = 2,
}

/// Run configuration. Start from [`mtesim_config_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MtesimConfig {
    pub mode: MtesimMode,
    pub seed: u64,
    pub tripwires: bool,
    /// `UINT64_MAX` arms every short granule.
    pub alloc_threshold: u64,
    /// Must be at least 1.
    pub sampling_rate: u64,
    /// Must be at least 1.
    pub access_threshold: u16,
    pub overread_skip: bool,
    pub odd_even: bool,
    pub allow_zero_tag: bool,
}

impl MtesimConfig {
    fn to_sim(self) -> Result<SimConfig, String> {
        if self.sampling_rate == 0 {
            return Err("sampling_rate must be at least 1".into());
        }
        if self.access_threshold == 0 {
            return Err("access_threshold must be at least 1".into());
        }
        Ok(SimConfig {
            mode: match self.mode {
                MtesimMode::Off => Mode::Off,
                MtesimMode::Async => Mode::Async,
                MtesimMode::Sync => Mode::Sync,
            },
            seed: self.seed,
            tripwires: self.tripwires,
            alloc_threshold: self.alloc_threshold,
            sampling_rate: self.sampling_rate,
            access_threshold: self.access_threshold,
            overread_skip: self.overread_skip,
            odd_even: self.odd_even,
            allow_zero_tag: self.allow_zero_tag,
            ..SimConfig::default()
        })
    }
}

/// A parsed trace program.
pub struct MtesimProgram(Program);

/// A machine running one program.
pub struct MtesimSimulator(Simulator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = CString::new(message.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> MtesimStatus) -> MtesimStatus {
    clear_error();
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("panic inside mtesim");
        MtesimStatus::Panic
    })
}

fn invalid(message: &str) -> MtesimStatus {
    set_error(message);
    MtesimStatus::InvalidArgument
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next mtesim call on the same thread.
#[no_mangle]
pub extern "C" fn mtesim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtesim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn mtesim_config_default() -> MtesimConfig {
    let d = SimConfig::default();
    MtesimConfig {
        mode: MtesimMode::Sync,
        seed: d.seed,
        tripwires: d.tripwires,
        alloc_threshold: d.alloc_threshold,
        sampling_rate: d.sampling_rate,
        access_threshold: d.access_threshold,
        overread_skip: d.overread_skip,
        odd_even: d.odd_even,
        allow_zero_tag: d.allow_zero_tag,
    }
}

/// Parses trace text. On success stores a new handle in `*out`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtesim_program_parse(text: *const c_char, out: *mut *mut MtesimProgram) -> MtesimStatus {
    guard(|| {
        if text.is_null() || out.is_null() {
            return invalid("null argument");
        }
        let Ok(text) = CStr::from_ptr(text).to_str() else {
            return invalid("trace text is not UTF-8");
        };
        match parse_program(text) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(MtesimProgram(p)));
                MtesimStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                MtesimStatus::ParseError
            }
        }
    })
}

/// Number of instructions, or 0 for NULL.
///
/// # Safety
/// `program` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtesim_program_len(program: *const MtesimProgram) -> usize {
    program.as_ref().map_or(0, |p| p.0.len())
}

/// Canonical text of the program; free with `mtesim_string_free`.
///
/// # Safety
/// `program` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtesim_program_render(program: *const MtesimProgram) -> *mut c_char {
    program.as_ref().map_or(ptr::null_mut(), |p| into_c_string(p.0.render()))
}

/// # Safety
/// `program` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtesim_program_free(program: *mut MtesimProgram) {
    if !program.is_null() {
        drop(Box::from_raw(program));
    }
}

/// Creates a simulator for a copy of `program`.
///
/// # Safety
/// `program` must be a live handle, `config` NULL (defaults) or valid, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtesim_simulator_new(
    program: *const MtesimProgram,
    config: *const MtesimConfig,
    out: *mut *mut MtesimSimulator,
) -> MtesimStatus {
    guard(|| {
        let (Some(program), false) = (program.as_ref(), out.is_null()) else {
            return invalid("null argument");
        };
        let config = config.as_ref().copied().unwrap_or_else(|| mtesim_config_default());
        match config.to_sim() {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(MtesimSimulator(Simulator::new(program.0.clone(), cfg))));
                MtesimStatus::Ok
            }
            Err(e) => invalid(&e),
        }
    })
}

/// # Safety
/// `sim` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtesim_simulator_free(sim: *mut MtesimSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

fn step_kind(outcome: &StepOutcome) -> MtesimStep {
    match outcome {
        StepOutcome::Continue => MtesimStep::Continue,
        StepOutcome::Halted => MtesimStep::Halted,
        StepOutcome::BugReported(_) => MtesimStep::BugReported,
    }
}

/// Executes one instruction slot and stores what happened in `*out`.
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtesim_simulator_step(sim: *mut MtesimSimulator, out: *mut MtesimStep) -> MtesimStatus {
    guard(|| {
        let (Some(sim), false) = (sim.as_mut(), out.is_null()) else {
            return invalid("null argument");
        };
        match sim.0.step() {
            Ok(o) => {
                *out = step_kind(&o);
                MtesimStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                MtesimStatus::SimError
            }
        }
    })
}

/// Runs to the end. Returns `MTESIM_STATUS_OK` on a clean halt and
/// `MTESIM_STATUS_BUG` when a bug was reported.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtesim_simulator_run(sim: *mut MtesimSimulator) -> MtesimStatus {
    guard(|| {
        let Some(sim) = sim.as_mut() else {
            return invalid("null argument");
        };
        match sim.0.run_to_end() {
            Ok(StepOutcome::BugReported(_)) => MtesimStatus::Bug,
            Ok(_) => MtesimStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                MtesimStatus::SimError
            }
        }
    })
}

/// Register `index` (0..=31), or 0 when out of range.
///
/// # Safety
/// `sim` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtesim_simulator_register(sim: *const MtesimSimulator, index: u32) -> u64 {
    sim.as_ref()
        .and_then(|s| s.0.final_registers().get(index as usize).copied())
        .unwrap_or(0)
}

/// JSON run report for the run so far; free with `mtesim_string_free`.
///
/// # Safety
/// `sim` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtesim_simulator_report_json(sim: *const MtesimSimulator) -> *mut c_char {
    sim.as_ref().map_or(ptr::null_mut(), |s| into_c_string(s.0.report().to_json()))
}

/// Parses and runs a trace in one call. When `report_json` is not NULL it
/// receives the JSON report (free with `mtesim_string_free`).
///
/// # Safety
/// `text` must be a NUL-terminated string; `config` NULL or valid;
/// `report_json` NULL or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtesim_run_trace(
    text: *const c_char,
    config: *const MtesimConfig,
    report_json: *mut *mut c_char,
) -> MtesimStatus {
    let mut program = ptr::null_mut();
    let status = mtesim_program_parse(text, &mut program);
    if status != MtesimStatus::Ok {
        return status;
    }
    let mut sim = ptr::null_mut();
    let status = mtesim_simulator_new(program, config, &mut sim);
    mtesim_program_free(program);
    if status != MtesimStatus::Ok {
        return status;
    }
    let status = mtesim_simulator_run(sim);
    if !report_json.is_null() && matches!(status, MtesimStatus::Ok | MtesimStatus::Bug) {
        *report_json = mtesim_simulator_report_json(sim);
    }
    mtesim_simulator_free(sim);
    status
}

/// The byte-granular benign-access check for a fault on granule `f & ~15`.
#[no_mangle]
pub extern "C" fn mtesim_check_access(f: u64, start: u64, size: u64, addrtag: u8, memtag: u8, metadata: u8) -> bool {
    mtesim::check_access(f, start, size, addrtag, memtag, metadata)
}

/// Fraction of physical storage spent on tags: 1/33.
#[no_mangle]
pub extern "C" fn mtesim_tag_storage_overhead() -> f64 {
    mtesim::TaggedMemory::tag_storage_overhead()
}
