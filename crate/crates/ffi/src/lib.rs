//! C ABI for `uavnoma`.
//!
//! Every fallible function returns a [`UavnomaStatus`]. On failure the
//! message is kept per thread and read with
//! [`uavnoma_last_error_message`]. Handles are opaque and must be released
//! with their `_free` function; strings returned through out-parameters are
//! released with [`uavnoma_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use uavnoma::channel::{self, ChannelParams};
use uavnoma::cli::{self, Overrides, Scenario, ScenarioBody};
use uavnoma::geometry::GroundUser;
use uavnoma::noma::{self, NomaGroup, SicMode};
use uavnoma::trajectory::{self, FlightConfig, TrajectorySolution};
use uavnoma::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UavnomaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    Contract = 4,
    Config = 5,
    Diagnostic = 6,
    Parse = 7,
    Io = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// A parsed and validated scenario.
pub struct UavnomaScenario {
    inner: Scenario,
}

/// A solved trajectory together with the configuration it was solved for.
pub struct UavnomaTrajectory {
    config: FlightConfig,
    solution: TrajectorySolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(UavnomaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Domain(_) => UavnomaStatus::Domain,
            Error::Contract(_) => UavnomaStatus::Contract,
            Error::Config { .. } => UavnomaStatus::Config,
            Error::Diagnostic(_) => UavnomaStatus::Diagnostic,
            Error::Parse(_) | Error::Json(_) => UavnomaStatus::Parse,
            Error::Io(_) | Error::Csv(_) => UavnomaStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UavnomaStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn call<F>(f: F) -> UavnomaStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UavnomaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside uavnoma".into());
            UavnomaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(UavnomaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uavnoma_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a TOML scenario.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut UavnomaScenario,
) -> UavnomaStatus {
    call(|| {
        let text = str_arg(toml, "toml")?;
        let inner = cli::parse_scenario_str(text)?;
        put(out, Box::into_raw(Box::new(UavnomaScenario { inner })), "out")
    })
}

/// # Safety
/// `s` must come from [`uavnoma_scenario_from_toml`] or be null.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_scenario_free(s: *mut UavnomaScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_scenario_set_seed(s: *mut UavnomaScenario, seed: u64) -> UavnomaStatus {
    call(|| {
        let s = s.as_mut().ok_or_else(|| null("scenario"))?;
        s.inner.seed = seed;
        Ok(())
    })
}

/// Sets the worker count used by [`uavnoma_scenario_run`].
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_scenario_set_workers(s: *mut UavnomaScenario, workers: usize) -> UavnomaStatus {
    call(|| {
        let s = s.as_mut().ok_or_else(|| null("scenario"))?;
        let o = Overrides {
            workers: Some(workers),
            ..Overrides::default()
        };
        s.inner.apply(&o)?;
        Ok(())
    })
}

/// Hex SHA-256 scenario hash. Free with [`uavnoma_string_free`].
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_scenario_hash(s: *const UavnomaScenario, out: *mut *mut c_char) -> UavnomaStatus {
    call(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        put(out, into_c_string(s.inner.hash()?), "out")
    })
}

/// Runs the scenario into `out_dir` and returns the manifest as JSON.
/// A null `out_dir` uses the scenario's default location. A null
/// `manifest_json` discards the manifest.
///
/// # Safety
/// `s` must be a live scenario handle; `out_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_scenario_run(
    s: *const UavnomaScenario,
    out_dir: *const c_char,
    manifest_json: *mut *mut c_char,
) -> UavnomaStatus {
    call(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let mut scenario = s.inner.clone();
        if !out_dir.is_null() {
            scenario.output = Some(PathBuf::from(str_arg(out_dir, "out_dir")?));
        }
        let manifest = cli::run(&scenario)?;
        if !manifest_json.is_null() {
            let text = serde_json::to_string(&manifest).map_err(Error::from)?;
            manifest_json.write(into_c_string(text));
        }
        Ok(())
    })
}

/// Solves one point of a trajectory scenario: user instance `instance`
/// at mission duration `durations[duration_index]`. With `oma` nonzero
/// the OMA baseline is solved instead of joint NOMA.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_solve(
    s: *const UavnomaScenario,
    instance: usize,
    duration_index: usize,
    oma: bool,
    out: *mut *mut UavnomaTrajectory,
) -> UavnomaStatus {
    call(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let ScenarioBody::Trajectory(t) = &s.inner.body else {
            return Err(Failure(
                UavnomaStatus::Contract,
                format!("`{}` scenario is not a trajectory scenario", s.inner.mode()),
            ));
        };
        if instance >= t.instances || duration_index >= t.durations.len() {
            return Err(Failure(UavnomaStatus::OutOfRange, "sweep point out of range".into()));
        }
        let mut config = t.config.clone();
        config.duration = t.durations[duration_index];
        config.users = t
            .users
            .resolve(s.inner.seed, instance as u64)
            .into_iter()
            .map(|p| GroundUser {
                position: p,
                rate_threshold: 0.0,
            })
            .collect();
        let solution = if oma {
            trajectory::oma_baseline(&config)?
        } else {
            trajectory::optimize_joint(&config)?
        };
        put(out, Box::into_raw(Box::new(UavnomaTrajectory { config, solution })), "out")
    })
}

/// # Safety
/// `t` must come from [`uavnoma_trajectory_solve`] or be null.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_free(t: *mut UavnomaTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of waypoints N + 1, or 0 for a null handle.
///
/// # Safety
/// `t` must be a live trajectory handle or null.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_waypoint_count(t: *const UavnomaTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.solution.waypoints.len())
}

/// Number of users K, or 0 for a null handle.
///
/// # Safety
/// `t` must be a live trajectory handle or null.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_user_count(t: *const UavnomaTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.config.users.len())
}

/// Minimum average rate in bits/s/Hz, or NaN for a null handle.
///
/// # Safety
/// `t` must be a live trajectory handle or null.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_min_rate(t: *const UavnomaTrajectory) -> f64 {
    t.as_ref().map_or(f64::NAN, |t| t.solution.min_avg_rate)
}

/// Copies interleaved `x, y` waypoints into `xy`, which must hold
/// `2 * waypoint_count` values.
///
/// # Safety
/// `t` must be a live trajectory handle; `xy` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_waypoints(
    t: *const UavnomaTrajectory,
    xy: *mut f64,
    len: usize,
) -> UavnomaStatus {
    call(|| {
        let t = t.as_ref().ok_or_else(|| null("trajectory"))?;
        let w = &t.solution.waypoints;
        if len != 2 * w.len() {
            return Err(Failure(UavnomaStatus::OutOfRange, format!("need {} values", 2 * w.len())));
        }
        let dst = out_slice(xy, len, "xy")?;
        for (i, q) in w.iter().enumerate() {
            dst[2 * i] = q.x;
            dst[2 * i + 1] = q.y;
        }
        Ok(())
    })
}

/// Copies the per-slot powers of `user` (watts) into `powers`, which must
/// hold `waypoint_count` values.
///
/// # Safety
/// `t` must be a live trajectory handle; `powers` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_powers(
    t: *const UavnomaTrajectory,
    user: usize,
    powers: *mut f64,
    len: usize,
) -> UavnomaStatus {
    call(|| {
        let t = t.as_ref().ok_or_else(|| null("trajectory"))?;
        let p = t
            .solution
            .powers
            .get(user)
            .ok_or_else(|| Failure(UavnomaStatus::OutOfRange, format!("no user {user}")))?;
        if len != p.len() {
            return Err(Failure(UavnomaStatus::OutOfRange, format!("need {} values", p.len())));
        }
        out_slice(powers, len, "powers")?.copy_from_slice(p);
        Ok(())
    })
}

/// Copies the average rate of every user into `rates` (`user_count` values).
///
/// # Safety
/// `t` must be a live trajectory handle; `rates` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_trajectory_avg_rates(
    t: *const UavnomaTrajectory,
    rates: *mut f64,
    len: usize,
) -> UavnomaStatus {
    call(|| {
        let t = t.as_ref().ok_or_else(|| null("trajectory"))?;
        let r = &t.solution.avg_rates;
        if len != r.len() {
            return Err(Failure(UavnomaStatus::OutOfRange, format!("need {} values", r.len())));
        }
        out_slice(rates, len, "rates")?.copy_from_slice(r);
        Ok(())
    })
}

/// LOS probability at `elevation_deg` for the sigmoid parameters `a`, `b`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_los_probability(
    elevation_deg: f64,
    a: f64,
    b: f64,
    out: *mut f64,
) -> UavnomaStatus {
    call(|| {
        let params = ChannelParams {
            los_a: a,
            los_b: b,
            ..ChannelParams::default()
        };
        put(out, channel::los_probability(elevation_deg, &params)?, "out")
    })
}

/// Max-min fair power split of `n` users with channel gains `gains`.
/// `coeffs` receives the power fraction of each user, indexed like `gains`.
///
/// # Safety
/// `gains` and `coeffs` must hold `n` values; `common_rate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_max_min_power(
    gains: *const f64,
    n: usize,
    total_power: f64,
    noise: f64,
    coeffs: *mut f64,
    common_rate: *mut f64,
) -> UavnomaStatus {
    call(|| {
        let g = slice_arg(gains, n, "gains")?;
        let split = noma::max_min_power_allocation(g, total_power, noise)?;
        let dst = out_slice(coeffs, n, "coeffs")?;
        dst.fill(0.0);
        for (&u, &a) in split.group.user_ids.iter().zip(&split.group.coeffs) {
            dst[u] = a;
        }
        put(common_rate, split.common_rate, "common_rate")
    })
}

/// Achievable SIC rates of one NOMA group. `coeffs` are indexed like
/// `gains`; users are decoded weakest first and cancellation is ideal.
///
/// # Safety
/// `gains`, `coeffs` and `rates` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn uavnoma_noma_rates(
    gains: *const f64,
    coeffs: *const f64,
    n: usize,
    total_power: f64,
    noise: f64,
    rates: *mut f64,
) -> UavnomaStatus {
    call(|| {
        let g = slice_arg(gains, n, "gains")?;
        let c = slice_arg(coeffs, n, "coeffs")?;
        let order = noma::decoding_order(g)?;
        let ordered: Vec<f64> = order.iter().map(|&u| c[u]).collect();
        let group = NomaGroup::new(order, ordered, total_power)?;
        let report = noma::noma_rates(g, &group, noise, &[], &[], SicMode::Idealized)?;
        let dst = out_slice(rates, n, "rates")?;
        for (&u, &r) in report.user_ids.iter().zip(&report.rates) {
            dst[u] = r;
        }
        Ok(())
    })
}
