//! Joint NOMA power allocation and 2D trajectory design for one UAV.
//!
//! The UAV flies at a fixed altitude from `start` to `end` in `T` seconds,
//! discretized into `N = round(T / delta)` segments with waypoints
//! `q[0..=N]`. Each waypoint is a transmission slot. The objective is the
//! minimum over users of the time-averaged NOMA rate. Channels are
//! deterministic LOS: `g_k[n] = beta0 * d_k[n]^-alpha_los`.
//!
//! The solver alternates two steps:
//!
//! * power: for fixed waypoints the max-min problem is solved through its
//!   Lagrange dual. For weights `w` on the simplex, each slot maximizes the
//!   weighted sum rate of a degraded broadcast channel; the optimum assigns
//!   each infinitesimal power level `z` to the user minimizing
//!   `(z + n_k) / w_k`, with `n_k = noise / g_k`, giving every user a
//!   contiguous power layer. The dual is minimized with pairwise weight
//!   transfers until the average rates are equal.
//! * trajectory: projected gradient ascent on a softmin of the average
//!   rates with powers fixed, projected onto the per-segment speed limit by
//!   cyclic clamping, with a backtracking line search.
//!
//! An outer iterate is only accepted when the true min average rate does
//! not decrease.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, MIN_DISTANCE_M};
use crate::error::{Error, Result};
use crate::geometry::{GroundUser, Point2, Rect};
use crate::noma::{self, NomaGroup, SicMode};

/// Relative spread applied to `n_k` so that users with equal gains still
/// occupy distinct power layers, consistent with the SIC tie-break by id.
const TIE_SPREAD: f64 = 1e-7;
const FEASIBILITY_TOL: f64 = 1e-9;
/// Relative slack the projection keeps below `v_max * delta`.
const PROJECTION_MARGIN: f64 = 1e-10;

/// How the OMA baseline picks the served user of each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmaSchedule {
    /// Slot by slot, raise the smallest running total.
    #[default]
    Greedy,
    /// Weight-balanced assignment over all slots, falling back to greedy
    /// when that is better.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerParams {
    /// Softmin temperature in bits/s/Hz.
    pub tau: f64,
    pub anneal_every: usize,
    pub anneal_factor: f64,
    pub max_outer: usize,
    /// Stop when an accepted outer iteration improves less than this.
    pub rel_tol: f64,
    /// Gradient steps per trajectory update.
    pub inner_steps: usize,
    pub projection_sweeps: usize,
    pub oma_schedule: OmaSchedule,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            anneal_every: 20,
            anneal_factor: 0.5,
            max_outer: 200,
            rel_tol: 1e-4,
            inner_steps: 20,
            projection_sweeps: 100,
            oma_schedule: OmaSchedule::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightConfig {
    pub start: Point2,
    pub end: Point2,
    pub altitude: f64,
    /// Mission duration T in seconds.
    pub duration: f64,
    /// Slot length in seconds.
    pub delta: f64,
    pub v_max: f64,
    pub p_max: f64,
    pub users: Vec<GroundUser>,
    /// Only `beta0`, `alpha_los` and `noise_power` are used.
    pub channel: ChannelParams,
    pub optimizer: OptimizerParams,
}

impl Default for FlightConfig {
    fn default() -> Self {
        Self {
            start: Point2::new(0.0, 500.0),
            end: Point2::new(0.0, -500.0),
            altitude: 100.0,
            duration: 25.0,
            delta: 0.5,
            v_max: 100.0,
            p_max: 0.1,
            users: Vec::new(),
            channel: ChannelParams::deterministic_los(1e-6, 1e-14),
            optimizer: OptimizerParams::default(),
        }
    }
}

impl FlightConfig {
    /// Number of segments N.
    pub fn segments(&self) -> usize {
        (self.duration / self.delta).round() as usize
    }

    /// Maximum segment length `v_max * delta`.
    pub fn max_step(&self) -> f64 {
        self.v_max * self.delta
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::config("trajectory.delta", "delta > 0"));
        }
        if !(self.duration > 0.0) || self.segments() < 2 {
            return Err(Error::config("trajectory.duration", "round(T / delta) >= 2"));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::config("trajectory.v_max", "v_max > 0"));
        }
        if !(self.p_max > 0.0) {
            return Err(Error::config("trajectory.p_max", "P_max > 0"));
        }
        if !(self.altitude > 0.0) {
            return Err(Error::config("trajectory.altitude", "H > 0"));
        }
        if self.users.is_empty() {
            return Err(Error::config("trajectory.users", "at least one user"));
        }
        let reach = self.segments() as f64 * self.max_step();
        if self.start.distance(self.end) > reach * (1.0 + 1e-12) {
            return Err(Error::config(
                "trajectory.duration",
                "||end - start|| <= v_max * T",
            ));
        }
        let o = &self.optimizer;
        if !(o.tau > 0.0) || !(o.anneal_factor > 0.0 && o.anneal_factor <= 1.0) {
            return Err(Error::config(
                "trajectory.optimizer",
                "tau > 0 and 0 < anneal_factor <= 1",
            ));
        }
        self.channel.validate()
    }

    fn is_tight(&self) -> bool {
        let reach = self.segments() as f64 * self.max_step();
        self.start.distance(self.end) >= reach * (1.0 - 1e-12)
    }

    fn gain(&self, q: Point2, user: Point2) -> f64 {
        let d = self.distance(q, user).max(MIN_DISTANCE_M);
        self.channel.beta0 * d.powf(-self.channel.alpha_los)
    }

    fn distance(&self, q: Point2, user: Point2) -> f64 {
        let h2 = q.distance(user).powi(2);
        (self.altitude * self.altitude + h2).sqrt()
    }
}

/// Users uniform on `region`.
pub fn random_users<R: Rng + ?Sized>(count: usize, region: &Rect, rng: &mut R) -> Vec<GroundUser> {
    (0..count)
        .map(|_| {
            GroundUser::at(
                region.x_min + rng.random::<f64>() * region.width(),
                region.y_min + rng.random::<f64>() * region.height(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySolution {
    /// `q[0..=N]`.
    pub waypoints: Vec<Point2>,
    /// `powers[k][n]` in watts.
    pub powers: Vec<Vec<f64>>,
    pub avg_rates: Vec<f64>,
    pub min_avg_rate: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TrajectorySolution {
    /// Segment speeds in m/s, one per segment.
    pub fn speeds(&self, delta: f64) -> Vec<f64> {
        self.waypoints
            .windows(2)
            .map(|s| s[0].distance(s[1]) / delta)
            .collect()
    }
}

/// Straight line at uniform speed.
pub fn init_trajectory(config: &FlightConfig) -> Result<Vec<Point2>> {
    config.validate()?;
    let n = config.segments();
    let d = config.end.sub(config.start);
    let mut q: Vec<Point2> = (0..=n)
        .map(|i| config.start.add(d.scale(i as f64 / n as f64)))
        .collect();
    q[0] = config.start;
    q[n] = config.end;
    Ok(q)
}

/// Per-user rates in one slot; `powers` is indexed by user.
pub fn slot_rates(q: Point2, powers: &[f64], config: &FlightConfig) -> Result<Vec<f64>> {
    let k = config.users.len();
    if powers.len() != k {
        return Err(Error::Contract(format!("{} powers for {k} users", powers.len())));
    }
    if powers.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Contract("powers must be >= 0".into()));
    }
    let used: f64 = powers.iter().sum();
    if used <= 0.0 {
        return Ok(vec![0.0; k]);
    }
    let gains: Vec<f64> = config.users.iter().map(|u| config.gain(q, u.position)).collect();
    let order = noma::decoding_order(&gains)?;
    let coeffs = order.iter().map(|&u| powers[u] / used).collect();
    let group = NomaGroup::new(order, coeffs, used)?;
    let report = noma::noma_rates(&gains, &group, config.channel.noise_power, &[], &[], SicMode::Idealized)?;
    let mut rates = vec![0.0; k];
    for (pos, &u) in report.user_ids.iter().enumerate() {
        rates[u] = report.rates[pos];
    }
    Ok(rates)
}

/// Average rate per user and their minimum.
pub fn evaluate(config: &FlightConfig, waypoints: &[Point2], powers: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let k = config.users.len();
    if powers.len() != k || powers.iter().any(|p| p.len() != waypoints.len()) {
        return Err(Error::Contract("power matrix must be users x waypoints".into()));
    }
    let slots = waypoints.len() as f64;
    let mut avg = vec![0.0; k];
    let mut column = vec![0.0; k];
    for (n, &q) in waypoints.iter().enumerate() {
        for u in 0..k {
            column[u] = powers[u][n];
        }
        for (a, r) in avg.iter_mut().zip(slot_rates(q, &column, config)?) {
            *a += r;
        }
    }
    avg.iter_mut().for_each(|a| *a /= slots);
    let min = avg.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((avg, min))
}

/// Checks endpoints, speed and power constraints of a solution.
pub fn check_constraints(config: &FlightConfig, sol: &TrajectorySolution) -> Result<()> {
    let n = config.segments();
    let q = &sol.waypoints;
    if q.len() != n + 1 {
        return Err(Error::Diagnostic(format!("{} waypoints, expected {}", q.len(), n + 1)));
    }
    if q[0] != config.start || q[n] != config.end {
        return Err(Error::Diagnostic("endpoints moved".into()));
    }
    let limit = config.max_step() + FEASIBILITY_TOL;
    if let Some(s) = q.windows(2).position(|s| s[0].distance(s[1]) > limit) {
        return Err(Error::Diagnostic(format!("segment {s} exceeds v_max * delta")));
    }
    for slot in 0..=n {
        let mut total = 0.0;
        for p in &sol.powers {
            if !(p[slot] >= 0.0) {
                return Err(Error::Diagnostic(format!("negative power in slot {slot}")));
            }
            total += p[slot];
        }
        if total > config.p_max + FEASIBILITY_TOL {
            return Err(Error::Diagnostic(format!("slot {slot} exceeds P_max")));
        }
    }
    Ok(())
}

/// Noise-to-gain ratios `n[slot][user]` and SIC orders for a trajectory.
struct SlotChannels {
    n: Vec<Vec<f64>>,
    order: Vec<Vec<usize>>,
}

impl SlotChannels {
    fn new(config: &FlightConfig, q: &[Point2]) -> Self {
        let noise = config.channel.noise_power;
        let mut n = Vec::with_capacity(q.len());
        let mut order = Vec::with_capacity(q.len());
        for &p in q {
            let gains: Vec<f64> = config.users.iter().map(|u| config.gain(p, u.position)).collect();
            let o = noma::decoding_order(&gains).unwrap_or_default();
            n.push(gains.iter().map(|g| noise / g).collect());
            order.push(o);
        }
        Self { n, order }
    }

    /// `n` spread by decoding position so ties follow the SIC order.
    fn spread(&self) -> Vec<Vec<f64>> {
        self.n
            .iter()
            .zip(&self.order)
            .map(|(n, order)| {
                let k = order.len();
                let mut out = n.clone();
                for (pos, &u) in order.iter().enumerate() {
                    out[u] *= 1.0 + TIE_SPREAD * (k - pos) as f64;
                }
                out
            })
            .collect()
    }
}

/// Rates of one slot with powers fixed, users decoded in `order`.
fn layered_rates(n: &[f64], order: &[usize], p: &[f64], out: &mut [f64]) {
    let mut later = 0.0;
    for &u in order.iter().rev() {
        out[u] = if p[u] > 0.0 {
            ((later + p[u] + n[u]) / (later + n[u])).log2()
        } else {
            0.0
        };
        later += p[u];
    }
}

/// Weighted-sum-rate optimal power layers `[lo, hi]` for one slot.
fn wsr_layers(n: &[f64], w: &[f64], p_max: f64, lo: &mut [f64], hi: &mut [f64]) {
    lo.iter_mut().for_each(|x| *x = 0.0);
    hi.iter_mut().for_each(|x| *x = 0.0);
    let mut cur = None;
    let mut best = f64::INFINITY;
    for k in 0..n.len() {
        if w[k] <= 0.0 {
            continue;
        }
        let v = n[k] / w[k];
        let better = match cur {
            None => true,
            Some(c) => v < best || (v == best && w[k] > w[c]),
        };
        if better {
            cur = Some(k);
            best = v;
        }
    }
    let Some(mut cur) = cur else { return };
    let mut z = 0.0;
    loop {
        let mut next: Option<(usize, f64)> = None;
        for j in 0..n.len() {
            if w[j] <= w[cur] {
                continue;
            }
            let zc = ((w[cur] * n[j] - w[j] * n[cur]) / (w[j] - w[cur])).max(z);
            let take = match next {
                None => true,
                Some((b, zb)) => zc < zb || (zc == zb && w[j] > w[b]),
            };
            if take {
                next = Some((j, zc));
            }
        }
        lo[cur] = z;
        match next {
            Some((j, zc)) if zc < p_max => {
                hi[cur] = zc;
                z = zc;
                cur = j;
            }
            _ => {
                hi[cur] = p_max;
                return;
            }
        }
    }
}

struct Dual<'a> {
    n: &'a [Vec<f64>],
    p_max: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> Dual<'a> {
    fn new(n: &'a [Vec<f64>], p_max: f64) -> Self {
        let k = n.first().map_or(0, Vec::len);
        Self {
            n,
            p_max,
            lo: vec![0.0; k],
            hi: vec![0.0; k],
        }
    }

    /// Average rates of the per-slot weighted-sum-rate maximizers.
    fn avg_rates(&mut self, w: &[f64]) -> Vec<f64> {
        let k = w.len();
        let mut avg = vec![0.0; k];
        for n in self.n {
            wsr_layers(n, w, self.p_max, &mut self.lo, &mut self.hi);
            for u in 0..k {
                if self.hi[u] > self.lo[u] {
                    avg[u] += ((self.hi[u] + n[u]) / (self.lo[u] + n[u])).log2();
                }
            }
        }
        let slots = self.n.len() as f64;
        avg.iter_mut().for_each(|a| *a /= slots);
        avg
    }

    fn powers(&mut self, w: &[f64]) -> Vec<Vec<f64>> {
        let k = w.len();
        let mut p = vec![vec![0.0; self.n.len()]; k];
        for (s, n) in self.n.iter().enumerate() {
            wsr_layers(n, w, self.p_max, &mut self.lo, &mut self.hi);
            for u in 0..k {
                p[u][s] = (self.hi[u] - self.lo[u]).max(0.0);
            }
        }
        p
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// Minimizes the dual over the simplex by pairwise weight transfers from
/// the user with the largest average rate to the one with the smallest.
fn solve_dual(n: &[Vec<f64>], p_max: f64, warm: Option<&[f64]>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = n.first().map_or(0, Vec::len);
    let mut w: Vec<f64> = match warm {
        Some(w0) if w0.len() == k && w0.iter().all(|&x| x > 0.0) => w0.to_vec(),
        _ => vec![1.0 / k as f64; k],
    };
    let mut dual = Dual::new(n, p_max);
    if k > 1 {
        for _ in 0..2000 {
            let r = dual.avg_rates(&w);
            let i = argmax(&r);
            let j = argmin(&r);
            if r[i] - r[j] < 1e-10 {
                break;
            }
            let (mut lo, mut hi) = (0.0, w[i]);
            let mut trial = w.clone();
            for _ in 0..100 {
                let t = 0.5 * (lo + hi);
                if t <= lo || t >= hi {
                    break;
                }
                trial[i] = w[i] - t;
                trial[j] = w[j] + t;
                let rt = dual.avg_rates(&trial);
                if rt[j] < rt[i] {
                    lo = t;
                } else {
                    hi = t;
                }
            }
            let t = 0.5 * (lo + hi);
            let (wi, wj) = (w[i] - t, w[j] + t);
            if wi == w[i] && wj == w[j] {
                break;
            }
            w[i] = wi;
            w[j] = wj;
        }
    }
    (dual.powers(&w), w)
}

/// Max-min powers for fixed waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSolution {
    /// `powers[k][n]` in watts.
    pub powers: Vec<Vec<f64>>,
    /// Dual weights at the solution.
    pub weights: Vec<f64>,
    pub avg_rates: Vec<f64>,
    pub min_avg_rate: f64,
}

/// Max-min optimal NOMA powers for a fixed trajectory.
pub fn power_subproblem(waypoints: &[Point2], config: &FlightConfig) -> Result<PowerSolution> {
    config.validate()?;
    let ch = SlotChannels::new(config, waypoints);
    let (powers, weights) = solve_dual(&ch.spread(), config.p_max, None);
    let (avg_rates, min_avg_rate) = evaluate(config, waypoints, &powers)?;
    Ok(PowerSolution {
        powers,
        weights,
        avg_rates,
        min_avg_rate,
    })
}

/// Full-power single-user rates `r[slot][user]`.
fn solo_rates(config: &FlightConfig, ch: &SlotChannels) -> Vec<Vec<f64>> {
    ch.n.iter()
        .map(|n| n.iter().map(|&x| (1.0 + config.p_max / x).log2()).collect())
        .collect()
}

fn assignment_totals(r: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<f64> {
    let mut totals = vec![0.0; k];
    for (s, &u) in assign.iter().enumerate() {
        totals[u] += r[s][u];
    }
    totals
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Slot by slot, serve the user that maximizes the smallest running total;
/// ties go to the most starved user, then the larger rate.
fn greedy_assignment(r: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut totals = vec![0.0; k];
    let mut assign = Vec::with_capacity(r.len());
    for rs in r {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..k {
            let min_after = (0..k)
                .map(|j| totals[j] + if j == u { rs[u] } else { 0.0 })
                .fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((b, m)) => {
                    min_after > m
                        || (min_after == m && totals[u] < totals[b])
                        || (min_after == m && totals[u] == totals[b] && rs[u] > rs[b])
                }
            };
            if better {
                best = Some((u, min_after));
            }
        }
        let u = best.map_or(0, |b| b.0);
        totals[u] += rs[u];
        assign.push(u);
    }
    assign
}

fn weighted_assignment(r: &[Vec<f64>], w: &[f64]) -> Vec<usize> {
    r.iter()
        .map(|rs| {
            let mut best = 0;
            for u in 1..rs.len() {
                if w[u] * rs[u] > w[best] * rs[best] {
                    best = u;
                }
            }
            best
        })
        .collect()
}

/// Each slot serves the user maximizing `w_k * r_k`, with the weights
/// chosen by pairwise transfers to balance the totals.
fn dual_assignment(r: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut w = vec![1.0 / k as f64; k];
    let mut assign = weighted_assignment(r, &w);
    for _ in 0..200 {
        let totals = assignment_totals(r, &assign, k);
        let i = argmax(&totals);
        let j = argmin(&totals);
        if i == j {
            break;
        }
        let (mut lo, mut hi) = (0.0, w[i]);
        let mut trial = w.clone();
        for _ in 0..60 {
            let t = 0.5 * (lo + hi);
            trial[i] = w[i] - t;
            trial[j] = w[j] + t;
            let tt = assignment_totals(r, &weighted_assignment(r, &trial), k);
            if tt[j] < tt[i] {
                lo = t;
            } else {
                hi = t;
            }
        }
        let mut best = (min_of(&totals), None);
        for t in [lo, hi] {
            trial[i] = w[i] - t;
            trial[j] = w[j] + t;
            let a = weighted_assignment(r, &trial);
            let m = min_of(&assignment_totals(r, &a, k));
            if m > best.0 {
                best = (m, Some((trial.clone(), a)));
            }
        }
        match best.1 {
            Some((wt, a)) => {
                w = wt;
                assign = a;
            }
            None => break,
        }
    }
    assign
}

/// Moves single slots to the currently worst user while that raises the
/// minimum total.
fn repair_assignment(r: &[Vec<f64>], assign: &mut [usize], k: usize) {
    for _ in 0..4 * r.len() {
        let totals = assignment_totals(r, assign, k);
        let j = argmin(&totals);
        let current = min_of(&totals);
        let mut best: Option<(usize, f64)> = None;
        for (s, &i) in assign.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut t = totals.clone();
            t[i] -= r[s][i];
            t[j] += r[s][j];
            let m = min_of(&t);
            if m > current && best.is_none_or(|b| m > b.1) {
                best = Some((s, m));
            }
        }
        match best {
            Some((s, _)) => assign[s] = j,
            None => break,
        }
    }
}

/// One user per slot at full power. The balanced mode polishes both the
/// weight-balanced and the greedy schedule with single-slot moves and keeps
/// the better one.
fn oma_schedule(config: &FlightConfig, ch: &SlotChannels) -> Vec<Vec<f64>> {
    let k = config.users.len();
    let r = solo_rates(config, ch);
    let assign = match config.optimizer.oma_schedule {
        OmaSchedule::Greedy => greedy_assignment(&r, k),
        OmaSchedule::Balanced => {
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mut a in [dual_assignment(&r, k), greedy_assignment(&r, k)] {
                repair_assignment(&r, &mut a, k);
                let m = min_of(&assignment_totals(&r, &a, k));
                if best.as_ref().is_none_or(|b| m > b.0) {
                    best = Some((m, a));
                }
            }
            best.map(|b| b.1).unwrap_or_default()
        }
    };
    let mut powers = vec![vec![0.0; r.len()]; k];
    for (s, &u) in assign.iter().enumerate() {
        powers[u][s] = config.p_max;
    }
    powers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    Noma,
    Oma,
}

fn fast_min(ch: &SlotChannels, powers: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let k = powers.len();
    let mut avg = vec![0.0; k];
    let mut rates = vec![0.0; k];
    let mut col = vec![0.0; k];
    for s in 0..ch.n.len() {
        for u in 0..k {
            col[u] = powers[u][s];
        }
        layered_rates(&ch.n[s], &ch.order[s], &col, &mut rates);
        for u in 0..k {
            avg[u] += rates[u];
        }
    }
    let slots = ch.n.len() as f64;
    avg.iter_mut().for_each(|a| *a /= slots);
    let min = avg.iter().copied().fold(f64::INFINITY, f64::min);
    (avg, min)
}

/// Powers for `q`, never worse than `incumbent` on the same waypoints.
fn power_step(
    config: &FlightConfig,
    q: &[Point2],
    access: Access,
    incumbent: Option<&[Vec<f64>]>,
    warm: Option<&[f64]>,
) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
    let ch = SlotChannels::new(config, q);
    let (cand, w) = match access {
        Access::Noma => {
            let (p, w) = solve_dual(&ch.spread(), config.p_max, warm);
            (p, Some(w))
        }
        Access::Oma => (oma_schedule(config, &ch), None),
    };
    if let Some(inc) = incumbent {
        if fast_min(&ch, inc).1 > fast_min(&ch, &cand).1 {
            return (inc.to_vec(), w);
        }
    }
    (cand, w)
}

fn softmin(values: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = values.iter().map(|v| (-(v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    (m - tau * z.ln(), e.iter().map(|x| x / z).collect())
}

fn smoothed(config: &FlightConfig, q: &[Point2], powers: &[Vec<f64>], tau: f64) -> f64 {
    let ch = SlotChannels::new(config, q);
    softmin(&fast_min(&ch, powers).0, tau).0
}

/// Gradient of the softmin objective with respect to each waypoint.
fn gradient(config: &FlightConfig, q: &[Point2], powers: &[Vec<f64>], tau: f64) -> Vec<Point2> {
    let ch = SlotChannels::new(config, q);
    let (avg, _) = fast_min(&ch, powers);
    let (_, pi) = softmin(&avg, tau);
    let k = powers.len();
    let slots = q.len() as f64;
    let alpha = config.channel.alpha_los;
    let scale = config.channel.noise_power / config.channel.beta0;
    let mut grad = vec![Point2::default(); q.len()];
    for (s, &qs) in q.iter().enumerate() {
        let mut later = 0.0;
        for &u in ch.order[s].iter().rev() {
            let p = powers[u][s];
            let n = ch.n[s][u];
            if p > 0.0 {
                let w = config.users[u].position;
                let d = config.distance(qs, w);
                if d > MIN_DISTANCE_M {
                    let dr_dn = (1.0 / (later + p + n) - 1.0 / (later + n)) / std::f64::consts::LN_2;
                    let dn_dq = scale * alpha * d.powf(alpha - 2.0);
                    let c = pi[u] / slots * dr_dn * dn_dq;
                    grad[s] = grad[s].add(qs.sub(w).scale(c));
                }
            }
            later += p;
        }
        let _ = k;
    }
    grad
}

/// Cyclic per-segment clamping with fixed endpoints.
fn project(q: &mut [Point2], limit: f64, sweeps: usize) -> bool {
    let segs = q.len() - 1;
    // Aim slightly inside the limit so unconverged residue stays feasible.
    let target = limit * (1.0 - PROJECTION_MARGIN);
    for sweep in 0..sweeps {
        let mut clean = true;
        let mut fix = |s: usize, q: &mut [Point2]| {
            let d = q[s + 1].sub(q[s]);
            let len = d.norm();
            if len > target {
                clean = false;
                let excess = d.scale((len - target) / len);
                if s == 0 {
                    q[1] = q[1].sub(excess);
                } else if s + 1 == segs {
                    q[s] = q[s].add(excess);
                } else {
                    q[s] = q[s].add(excess.scale(0.5));
                    q[s + 1] = q[s + 1].sub(excess.scale(0.5));
                }
            }
        };
        if sweep % 2 == 0 {
            (0..segs).for_each(|s| fix(s, q));
        } else {
            (0..segs).rev().for_each(|s| fix(s, q));
        }
        if clean {
            return true;
        }
    }
    q.windows(2).all(|s| s[0].distance(s[1]) <= limit)
}

/// Trajectory update with powers fixed; returns the new waypoints and the
/// step length to start from next time.
fn trajectory_steps(
    config: &FlightConfig,
    q: &[Point2],
    powers: &[Vec<f64>],
    tau: f64,
    mut step: f64,
    iterations: usize,
) -> (Vec<Point2>, f64) {
    let limit = config.max_step();
    let mut q = q.to_vec();
    let last = q.len() - 1;
    let mut f = smoothed(config, &q, powers, tau);
    for _ in 0..iterations {
        let g = gradient(config, &q, powers, tau);
        let gmax = g[1..last].iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !(gmax > 0.0) {
            break;
        }
        let mut accepted = false;
        while step > 1e-6 {
            let mut cand = q.clone();
            for s in 1..last {
                cand[s] = cand[s].add(g[s].scale(step / gmax));
            }
            if project(&mut cand, limit, config.optimizer.projection_sweeps) {
                let fc = smoothed(config, &cand, powers, tau);
                if fc > f {
                    q = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (step * 1.5).min(limit);
    }
    (q, step.max(1e-6))
}

/// Trajectory update with powers fixed.
pub fn trajectory_subproblem(
    powers: &[Vec<f64>],
    waypoints: &[Point2],
    config: &FlightConfig,
) -> Result<Vec<Point2>> {
    config.validate()?;
    if waypoints.len() != config.segments() + 1 {
        return Err(Error::Contract("waypoint count must be N + 1".into()));
    }
    if config.optimizer.inner_steps == 0 || config.is_tight() {
        return Ok(waypoints.to_vec());
    }
    let mut q = waypoints.to_vec();
    if !project(&mut q, config.max_step(), config.optimizer.projection_sweeps) {
        return Err(Error::Diagnostic("speed projection did not converge".into()));
    }
    let (q, _) = trajectory_steps(
        config,
        &q,
        powers,
        config.optimizer.tau,
        config.max_step(),
        config.optimizer.inner_steps,
    );
    Ok(q)
}

fn optimize(config: &FlightConfig, access: Access) -> Result<TrajectorySolution> {
    let mut q = init_trajectory(config)?;
    let opt = config.optimizer;
    let (mut powers, mut weights) = power_step(config, &q, access, None, None);
    let mut iterations = 0;
    let mut converged = true;
    if !config.is_tight() {
        converged = false;
        let mut obj = fast_min(&SlotChannels::new(config, &q), &powers).1;
        let mut tau = opt.tau;
        let mut step = config.max_step();
        for it in 1..=opt.max_outer {
            iterations = it;
            if it > 1 && opt.anneal_every > 0 && (it - 1) % opt.anneal_every == 0 {
                tau *= opt.anneal_factor;
            }
            let (qc, next_step) = trajectory_steps(config, &q, &powers, tau, step, opt.inner_steps);
            let (pc, wc) = power_step(config, &qc, access, Some(&powers), weights.as_deref());
            let oc = fast_min(&SlotChannels::new(config, &qc), &pc).1;
            if oc >= obj {
                let rel = (oc - obj) / obj.abs().max(1e-12);
                q = qc;
                powers = pc;
                weights = wc.or(weights);
                obj = oc;
                step = next_step;
                if rel < opt.rel_tol {
                    converged = true;
                    break;
                }
            } else {
                step *= 0.5;
                if step < 1e-6 {
                    converged = true;
                    break;
                }
            }
        }
    }
    let (avg_rates, min_avg_rate) = evaluate(config, &q, &powers)?;
    Ok(TrajectorySolution {
        waypoints: q,
        powers,
        avg_rates,
        min_avg_rate,
        iterations,
        converged,
    })
}

/// Alternating power / trajectory optimization with NOMA in every slot.
pub fn optimize_joint(config: &FlightConfig) -> Result<TrajectorySolution> {
    optimize(config, Access::Noma)
}

/// Same scheme with one user served per slot at full power.
pub fn oma_baseline(config: &FlightConfig) -> Result<TrajectorySolution> {
    optimize(config, Access::Oma)
}

/// Writes `slot,x,y,speed,p_1..p_K,rate_1..rate_K`, one row per waypoint,
/// optionally followed by `scenario_hash,seed` columns. The speed of slot n
/// is the length of segment n over delta (0 for the last slot).
pub fn write_csv<W: Write>(
    config: &FlightConfig,
    sol: &TrajectorySolution,
    audit: Option<(&str, u64)>,
    out: W,
) -> Result<()> {
    let k = config.users.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slot".to_string(), "x".into(), "y".into(), "speed".into()];
    header.extend((1..=k).map(|i| format!("p_{i}")));
    header.extend((1..=k).map(|i| format!("rate_{i}")));
    if audit.is_some() {
        header.extend(["scenario_hash".to_string(), "seed".into()]);
    }
    w.write_record(&header)?;
    let speeds = sol.speeds(config.delta);
    let mut col = vec![0.0; k];
    for (n, &q) in sol.waypoints.iter().enumerate() {
        for u in 0..k {
            col[u] = sol.powers[u][n];
        }
        let rates = slot_rates(q, &col, config)?;
        let mut row = vec![n.to_string(), q.x.to_string(), q.y.to_string()];
        row.push(speeds.get(n).copied().unwrap_or(0.0).to_string());
        row.extend(col.iter().map(|p| p.to_string()));
        row.extend(rates.iter().map(|r| r.to_string()));
        if let Some((hash, seed)) = audit {
            row.extend([hash.to_string(), seed.to_string()]);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
