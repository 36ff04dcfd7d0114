//! K-means clustering and tabular Q-learning for 3D UAV placement and
//! movement.
//!
//! Users are clustered with K-means; each UAV starts above its cluster
//! centroid. UAVs move on a 3D grid of cell centres with seven actions
//! (stay and one cell along each axis). Each UAV runs its own Q-table and
//! all UAVs share one reward: the min (or sum) of the users' effective
//! rates under NOMA inside each cluster and equal TDMA slots across
//! clusters. Users are assigned to the nearest UAV every step.
//!
//! In placement mode a UAV's state is its own cell. In movement mode users
//! follow a reflected random walk and the state also carries the ground
//! cell of the centroid of the users currently assigned to the UAV.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelMode, ChannelParams};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3, Rect};
use crate::noma::{self, NomaGroup};
use crate::rng::{purpose, substream, SimRng};

pub const QTABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: Point3,
    pub max: Point3,
}

/// Regular 3D grid of cells over a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub bounds: Box3,
    /// Cell size per axis in meters.
    pub cell: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
    pub iz: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stay,
    PlusX,
    MinusX,
    PlusY,
    MinusY,
    PlusZ,
    MinusZ,
}

impl Action {
    /// Index order; ties in a Q row resolve to the lowest index.
    pub const ALL: [Action; 7] = [
        Action::Stay,
        Action::PlusX,
        Action::MinusX,
        Action::PlusY,
        Action::MinusY,
        Action::PlusZ,
        Action::MinusZ,
    ];

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|&a| a == self).unwrap_or(0)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Stay => "stay",
            Action::PlusX => "+x",
            Action::MinusX => "-x",
            Action::PlusY => "+y",
            Action::MinusY => "-y",
            Action::PlusZ => "+z",
            Action::MinusZ => "-z",
        }
    }

    fn delta(self) -> [i64; 3] {
        match self {
            Action::Stay => [0, 0, 0],
            Action::PlusX => [1, 0, 0],
            Action::MinusX => [-1, 0, 0],
            Action::PlusY => [0, 1, 0],
            Action::MinusY => [0, -1, 0],
            Action::PlusZ => [0, 0, 1],
            Action::MinusZ => [0, 0, -1],
        }
    }
}

impl GridWorld {
    pub fn validate(&self) -> Result<()> {
        let lo = [self.bounds.min.x, self.bounds.min.y, self.bounds.min.z];
        let hi = [self.bounds.max.x, self.bounds.max.y, self.bounds.max.z];
        for axis in 0..3 {
            if !(self.cell[axis] > 0.0) {
                return Err(Error::config("grid.cell", "cell size > 0"));
            }
            let extent = hi[axis] - lo[axis];
            if !(extent > 0.0) {
                return Err(Error::config("grid.bounds", "max > min on every axis"));
            }
            let n = extent / self.cell[axis];
            if (n - n.round()).abs() > 1e-9 * n.max(1.0) || n.round() < 1.0 {
                return Err(Error::config("grid.cell", "bounds extent divisible by cell size"));
            }
        }
        if !(self.bounds.min.z > 0.0) {
            return Err(Error::config("grid.bounds", "min altitude > 0"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let b = &self.bounds;
        [
            ((b.max.x - b.min.x) / self.cell[0]).round() as usize,
            ((b.max.y - b.min.y) / self.cell[1]).round() as usize,
            ((b.max.z - b.min.z) / self.cell[2]).round() as usize,
        ]
    }

    pub fn n_cells(&self) -> usize {
        let [x, y, z] = self.dims();
        x * y * z
    }

    pub fn n_ground_cells(&self) -> usize {
        let [x, y, _] = self.dims();
        x * y
    }

    /// Ground footprint of the grid.
    pub fn area(&self) -> Rect {
        Rect::new(self.bounds.min.x, self.bounds.max.x, self.bounds.min.y, self.bounds.max.y)
    }

    pub fn center(&self, c: Cell) -> Point3 {
        let b = &self.bounds;
        Point3::new(
            b.min.x + (c.ix as f64 + 0.5) * self.cell[0],
            b.min.y + (c.iy as f64 + 0.5) * self.cell[1],
            b.min.z + (c.iz as f64 + 0.5) * self.cell[2],
        )
    }

    fn axis_index(v: f64, min: f64, size: f64, n: usize) -> usize {
        let i = ((v - min) / size).floor();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    }

    /// Cell containing `p`, clamped to the grid.
    pub fn snap(&self, p: Point3) -> Cell {
        let [nx, ny, nz] = self.dims();
        let b = &self.bounds;
        Cell {
            ix: Self::axis_index(p.x, b.min.x, self.cell[0], nx),
            iy: Self::axis_index(p.y, b.min.y, self.cell[1], ny),
            iz: Self::axis_index(p.z, b.min.z, self.cell[2], nz),
        }
    }

    pub fn index(&self, c: Cell) -> usize {
        let [nx, ny, _] = self.dims();
        (c.iz * ny + c.iy) * nx + c.ix
    }

    pub fn cell_of(&self, index: usize) -> Cell {
        let [nx, ny, _] = self.dims();
        Cell {
            ix: index % nx,
            iy: (index / nx) % ny,
            iz: index / (nx * ny),
        }
    }

    pub fn ground_index(&self, p: Point2) -> usize {
        let [nx, ny, _] = self.dims();
        let b = &self.bounds;
        let ix = Self::axis_index(p.x, b.min.x, self.cell[0], nx);
        let iy = Self::axis_index(p.y, b.min.y, self.cell[1], ny);
        iy * nx + ix
    }

    /// Cell reached by `action`, or `None` if it leaves the grid.
    pub fn step(&self, c: Cell, action: Action) -> Option<Cell> {
        let dims = self.dims();
        let d = action.delta();
        let mut out = [c.ix, c.iy, c.iz];
        for axis in 0..3 {
            let v = out[axis] as i64 + d[axis];
            if v < 0 || v >= dims[axis] as i64 {
                return None;
            }
            out[axis] = v as usize;
        }
        Some(Cell {
            ix: out[0],
            iy: out[1],
            iz: out[2],
        })
    }

    pub fn legal(&self, c: Cell) -> [bool; 7] {
        let mut m = [false; 7];
        for (i, &a) in Action::ALL.iter().enumerate() {
            m[i] = self.step(c, a).is_some();
        }
        m
    }

    /// Hex SHA-256 of the grid's JSON form.
    pub fn hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinRate,
    SumRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    Constant(f64),
    /// `1 / n` for the n-th update of a state-action pair.
    InverseVisits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlHyper {
    pub alpha: AlphaSchedule,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Per-episode multiplicative decay.
    pub epsilon_decay: f64,
    pub episodes: usize,
    pub steps: usize,
}

impl Default for RlHyper {
    fn default() -> Self {
        Self {
            alpha: AlphaSchedule::Constant(0.1),
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.995,
            episodes: 1000,
            steps: 30,
        }
    }
}

impl RlHyper {
    pub fn validate(&self) -> Result<()> {
        if let AlphaSchedule::Constant(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config("rl.alpha", "0 < alpha <= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("rl.gamma", "0 <= gamma < 1"));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return Err(Error::config("rl.epsilon", "epsilon in [0, 1]"));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::config("rl.epsilon_decay", "0 < decay <= 1"));
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        (self.epsilon_start * self.epsilon_decay.powi(episode as i32)).max(self.epsilon_end)
    }
}

/// Reflected random walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomWalkParams {
    /// Meters per slot.
    pub step: f64,
    pub move_prob: f64,
}

impl Default for RandomWalkParams {
    fn default() -> Self {
        Self {
            step: 10.0,
            move_prob: 1.0,
        }
    }
}

impl RandomWalkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step >= 0.0) {
            return Err(Error::config("walk.step", "step >= 0"));
        }
        if !(0.0..=1.0).contains(&self.move_prob) {
            return Err(Error::config("walk.move_prob", "move_prob in [0, 1]"));
        }
        Ok(())
    }

    /// Users never leave their start point.
    pub fn is_static(&self) -> bool {
        self.step == 0.0 || self.move_prob == 0.0
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let mut v = v;
    for _ in 0..64 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
    v.clamp(lo, hi)
}

/// One random-walk slot: with probability `move_prob`, a step of fixed
/// length in a uniform direction, reflected at the area boundary.
pub fn random_walk_step<R: Rng + ?Sized>(p: Point2, params: &RandomWalkParams, area: &Rect, rng: &mut R) -> Point2 {
    if params.step == 0.0 || rng.random::<f64>() >= params.move_prob {
        return p;
    }
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    Point2::new(
        reflect(p.x + params.step * theta.cos(), area.x_min, area.x_max),
        reflect(p.y + params.step * theta.sin(), area.y_min, area.y_max),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Point2>,
    pub labels: Vec<usize>,
    /// Users per cluster.
    pub counts: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub distortion: f64,
    /// Distortion after every Lloyd iteration.
    pub history: Vec<f64>,
}

fn nearest(p: Point2, centers: &[Point2]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = p.distance(*c);
        if d < bd {
            bd = d;
            best = i;
        }
    }
    best
}

fn distortion(points: &[Point2], centers: &[Point2], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| p.distance(centers[l]).powi(2))
        .sum()
}

/// K-means++ seeding followed by Lloyd iterations. An empty cluster is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: &[Point2], k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<KMeansResult> {
    if k < 1 {
        return Err(Error::config("kmeans.k", "K >= 1"));
    }
    if points.len() < k {
        return Err(Error::Contract(format!("{} points for K = {k}", points.len())));
    }
    let mut rng = substream(seed, purpose::KMEANS, 0);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| p.distance(*c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick]);
    }

    let mut labels: Vec<usize> = points.iter().map(|&p| nearest(p, &centers)).collect();
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut sum = vec![Point2::default(); k];
        let mut count = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sum[l] = sum[l].add(*p);
            count[l] += 1;
        }
        let mut next = centers.clone();
        for c in 0..k {
            if count[c] > 0 {
                next[c] = sum[c].scale(1.0 / count[c] as f64);
            }
        }
        for c in 0..k {
            if count[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = points[a].distance(next[labels[a]]);
                        let db = points[b].distance(next[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                next[c] = points[far];
            }
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| a.distance(*b))
            .fold(0.0, f64::max);
        centers = next;
        labels = points.iter().map(|&p| nearest(p, &centers)).collect();
        history.push(distortion(points, &centers, &labels));
        if shift < tol {
            break;
        }
    }
    let mut counts = vec![0; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    Ok(KMeansResult {
        distortion: distortion(points, &centers, &labels),
        centroids: centers,
        labels,
        counts,
        history,
    })
}

/// Each user goes to the UAV with the nearest ground projection.
pub fn nearest_assignment(uavs: &[Point3], users: &[Point2]) -> Vec<usize> {
    let ground: Vec<Point2> = uavs.iter().map(|u| u.ground()).collect();
    users.iter().map(|&p| nearest(p, &ground)).collect()
}

/// Shared reward: per-user effective rates with max-min NOMA inside each
/// cluster and equal TDMA fractions `1 / N_uav` across clusters, using mean
/// (fading- and LOS-averaged) gains.
pub fn reward(
    uavs: &[Point3],
    users: &[Point2],
    assignment: &[usize],
    channel: &ChannelParams,
    uav_power: f64,
    objective: Objective,
) -> Result<f64> {
    Ok(objective_value(&user_rates(uavs, users, assignment, channel, uav_power)?, objective))
}

fn objective_value(rates: &[f64], objective: Objective) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    match objective {
        Objective::MinRate => rates.iter().copied().fold(f64::INFINITY, f64::min),
        Objective::SumRate => rates.iter().sum(),
    }
}

/// Effective rate of every user.
pub fn user_rates(
    uavs: &[Point3],
    users: &[Point2],
    assignment: &[usize],
    channel: &ChannelParams,
    uav_power: f64,
) -> Result<Vec<f64>> {
    if assignment.len() != users.len() || assignment.iter().any(|&a| a >= uavs.len()) {
        return Err(Error::Contract("assignment must map every user to a UAV".into()));
    }
    let mut gains = vec![0.0; users.len()];
    for (u, &v) in assignment.iter().enumerate() {
        gains[u] = channel::mean_gain(uavs[v], users[u], channel)?;
    }
    let mut clusters = Vec::with_capacity(uavs.len());
    for v in 0..uavs.len() {
        let members: Vec<usize> = (0..users.len()).filter(|&u| assignment[u] == v).collect();
        if members.is_empty() {
            clusters.push(NomaGroup {
                user_ids: Vec::new(),
                coeffs: Vec::new(),
                total_power: uav_power,
            });
            continue;
        }
        let local: Vec<f64> = members.iter().map(|&u| gains[u]).collect();
        let split = noma::max_min_power_allocation(&local, uav_power, channel.noise_power)?;
        let ids = split.group.user_ids.iter().map(|&i| members[i]).collect();
        clusters.push(NomaGroup::new(ids, split.group.coeffs, uav_power)?);
    }
    let n = uavs.len();
    let (_, rates) = noma::cluster_schedule(clusters, vec![1.0 / n as f64; n], &gains, channel.noise_power)?;
    Ok((0..users.len()).map(|u| rates.get(&u).copied().unwrap_or(0.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    Placement,
    Movement,
}

/// Independent per-UAV action-value tables stored as one flat array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub version: u32,
    pub grid_hash: String,
    pub grid: GridWorld,
    pub mode: StateMode,
    pub n_uav: usize,
    pub n_states: usize,
    pub hyper: RlHyper,
    /// UAV cells every episode and evaluation starts from.
    pub initial_cells: Vec<Cell>,
    pub values: Vec<f64>,
    pub visits: Vec<u64>,
}

impl QTable {
    pub fn new(grid: &GridWorld, mode: StateMode, initial_cells: Vec<Cell>, hyper: RlHyper) -> Self {
        let n_uav = initial_cells.len();
        let n_states = match mode {
            StateMode::Placement => grid.n_cells(),
            StateMode::Movement => grid.n_cells() * grid.n_ground_cells(),
        };
        let len = n_uav * n_states * 7;
        Self {
            version: QTABLE_VERSION,
            grid_hash: grid.hash(),
            grid: *grid,
            mode,
            n_uav,
            n_states,
            hyper,
            initial_cells,
            values: vec![0.0; len],
            visits: vec![0; len],
        }
    }

    fn offset(&self, uav: usize, state: usize) -> usize {
        (uav * self.n_states + state) * 7
    }

    pub fn row(&self, uav: usize, state: usize) -> &[f64] {
        let o = self.offset(uav, state);
        &self.values[o..o + 7]
    }

    pub fn get(&self, uav: usize, state: usize, action: Action) -> f64 {
        self.values[self.offset(uav, state) + action.index()]
    }

    /// The UAV's own cell encoded in a state.
    pub fn cell_of_state(&self, state: usize) -> Cell {
        self.grid.cell_of(state % self.grid.n_cells())
    }

    /// Best legal action, lowest index on ties.
    pub fn greedy(&self, uav: usize, state: usize) -> Action {
        let legal = self.grid.legal(self.cell_of_state(state));
        let row = self.row(uav, state);
        let mut best = 0;
        for i in 1..7 {
            if legal[i] && row[i] > row[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    fn max_legal(&self, uav: usize, state: usize) -> f64 {
        let legal = self.grid.legal(self.cell_of_state(state));
        let row = self.row(uav, state);
        (0..7).filter(|&i| legal[i]).map(|i| row[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: QTable = serde_json::from_str(s)?;
        if t.version != QTABLE_VERSION {
            return Err(Error::Parse(format!("unsupported Q-table version {}", t.version)));
        }
        if t.grid_hash != t.grid.hash() {
            return Err(Error::Parse("Q-table grid hash mismatch".into()));
        }
        if t.values.len() != t.n_uav * t.n_states * 7
            || t.visits.len() != t.values.len()
            || t.initial_cells.len() != t.n_uav
        {
            return Err(Error::Parse("Q-table size mismatch".into()));
        }
        Ok(t)
    }
}

/// One-step Q-learning update.
pub fn q_update(table: &mut QTable, uav: usize, state: usize, action: Action, r: f64, next_state: usize, hyper: &RlHyper) {
    let target = r + hyper.gamma * table.max_legal(uav, next_state);
    let i = table.offset(uav, state) + action.index();
    table.visits[i] += 1;
    let alpha = match hyper.alpha {
        AlphaSchedule::Constant(a) => a,
        AlphaSchedule::InverseVisits => 1.0 / table.visits[i] as f64,
    };
    table.values[i] = (1.0 - alpha) * table.values[i] + alpha * target;
}

/// Uniform legal action with probability `epsilon`, else greedy.
pub fn epsilon_greedy<R: Rng + ?Sized>(table: &QTable, uav: usize, state: usize, epsilon: f64, rng: &mut R) -> Action {
    if rng.random::<f64>() < epsilon {
        let legal = table.grid.legal(table.cell_of_state(state));
        let options: Vec<usize> = (0..7).filter(|&i| legal[i]).collect();
        Action::ALL[options[rng.random_range(0..options.len())]]
    } else {
        table.greedy(uav, state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningScenario {
    pub grid: GridWorld,
    pub n_uav: usize,
    pub users: Vec<Point2>,
    pub channel: ChannelParams,
    pub uav_power: f64,
    pub objective: Objective,
    /// Starting altitude, snapped to the grid.
    pub initial_altitude: f64,
    pub walk: RandomWalkParams,
}

impl Default for LearningScenario {
    fn default() -> Self {
        Self {
            grid: GridWorld {
                bounds: Box3 {
                    min: Point3::new(0.0, 0.0, 25.0),
                    max: Point3::new(600.0, 600.0, 325.0),
                },
                cell: [100.0, 100.0, 100.0],
            },
            n_uav: 2,
            users: Vec::new(),
            channel: ChannelParams {
                mode: ChannelMode::ProbabilisticLos,
                fading: false,
                ..ChannelParams::default()
            },
            uav_power: 1.0,
            objective: Objective::MinRate,
            initial_altitude: 175.0,
            walk: RandomWalkParams::default(),
        }
    }
}

impl LearningScenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_uav < 1 {
            return Err(Error::config("learning.n_uav", "N_uav >= 1"));
        }
        if self.users.len() < self.n_uav {
            return Err(Error::config("learning.users", "at least N_uav users"));
        }
        if !(self.uav_power > 0.0) {
            return Err(Error::config("learning.uav_power", "uav_power > 0"));
        }
        let area = self.grid.area();
        if self.users.iter().any(|&u| !area.contains(u)) {
            return Err(Error::config("learning.users", "users inside the grid footprint"));
        }
        self.walk.validate()?;
        self.channel.validate()
    }

    /// UAV cells above the K-means centroids at the initial altitude.
    pub fn initial_cells(&self, seed: u64) -> Result<Vec<Cell>> {
        let km = kmeans(&self.users, self.n_uav, 100, 1e-9, seed)?;
        Ok(km
            .centroids
            .iter()
            .map(|c| self.grid.snap(c.with_altitude(self.initial_altitude)))
            .collect())
    }

    fn positions(&self, cells: &[Cell]) -> Vec<Point3> {
        cells.iter().map(|&c| self.grid.center(c)).collect()
    }

    fn state(&self, mode: StateMode, cells: &[Cell], users: &[Point2], assignment: &[usize], uav: usize) -> usize {
        let own = self.grid.index(cells[uav]);
        match mode {
            StateMode::Placement => own,
            StateMode::Movement => {
                let mut sum = Point2::default();
                let mut n = 0;
                for (p, &a) in users.iter().zip(assignment) {
                    if a == uav {
                        sum = sum.add(*p);
                        n += 1;
                    }
                }
                let centroid = if n > 0 {
                    sum.scale(1.0 / n as f64)
                } else {
                    self.grid.center(cells[uav]).ground()
                };
                own + self.grid.n_cells() * self.grid.ground_index(centroid)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub table: QTable,
    pub initial_cells: Vec<Cell>,
    /// Cells after a greedy rollout of `steps` slots with the training users.
    pub final_cells: Vec<Cell>,
    pub final_positions: Vec<Point3>,
    /// Mean reward per training episode.
    pub episode_rewards: Vec<f64>,
    /// Largest reward observed during training.
    pub max_reward: f64,
}

fn train(scenario: &LearningScenario, hyper: &RlHyper, seed: u64, mode: StateMode) -> Result<TrainResult> {
    scenario.validate()?;
    hyper.validate()?;
    let init = scenario.initial_cells(seed)?;
    let mut table = QTable::new(&scenario.grid, mode, init.clone(), *hyper);
    let area = scenario.grid.area();
    let n = scenario.n_uav;
    let mut episode_rewards = Vec::with_capacity(hyper.episodes);
    let mut max_reward: f64 = 0.0;
    let mut states = vec![0; n];
    let mut actions = vec![Action::Stay; n];
    for e in 0..hyper.episodes {
        let eps = hyper.epsilon(e);
        let mut explore = substream(seed, purpose::EXPLORE, e as u64);
        let mut walk = substream(seed, purpose::WALK, e as u64);
        let mut cells = init.clone();
        let mut users = scenario.users.clone();
        let mut total = 0.0;
        for _ in 0..hyper.steps {
            if mode == StateMode::Movement {
                for u in users.iter_mut() {
                    *u = random_walk_step(*u, &scenario.walk, &area, &mut walk);
                }
            }
            let assign = nearest_assignment(&scenario.positions(&cells), &users);
            for v in 0..n {
                states[v] = scenario.state(mode, &cells, &users, &assign, v);
                actions[v] = epsilon_greedy(&table, v, states[v], eps, &mut explore);
            }
            let next: Vec<Cell> = (0..n)
                .map(|v| scenario.grid.step(cells[v], actions[v]).unwrap_or(cells[v]))
                .collect();
            let pos = scenario.positions(&next);
            let next_assign = nearest_assignment(&pos, &users);
            let r = reward(&pos, &users, &next_assign, &scenario.channel, scenario.uav_power, scenario.objective)?;
            max_reward = max_reward.max(r);
            total += r;
            for v in 0..n {
                let s_next = scenario.state(mode, &next, &users, &next_assign, v);
                q_update(&mut table, v, states[v], actions[v], r, s_next, hyper);
            }
            cells = next;
        }
        episode_rewards.push(if hyper.steps > 0 { total / hyper.steps as f64 } else { 0.0 });
    }
    let mut cells = init.clone();
    let users = scenario.users.clone();
    for _ in 0..hyper.steps {
        let assign = nearest_assignment(&scenario.positions(&cells), &users);
        cells = (0..n)
            .map(|v| {
                let a = table.greedy(v, scenario.state(mode, &cells, &users, &assign, v));
                scenario.grid.step(cells[v], a).unwrap_or(cells[v])
            })
            .collect();
    }
    Ok(TrainResult {
        final_positions: scenario.positions(&cells),
        final_cells: cells,
        initial_cells: init,
        table,
        episode_rewards,
        max_reward,
    })
}

/// Q-learning placement for static users.
pub fn train_placement(scenario: &LearningScenario, hyper: &RlHyper, seed: u64) -> Result<TrainResult> {
    train(scenario, hyper, seed, StateMode::Placement)
}

/// Q-learning movement for random-walk users. A walk that never moves
/// trains exactly like [`train_placement`].
pub fn train_movement(scenario: &LearningScenario, hyper: &RlHyper, seed: u64) -> Result<TrainResult> {
    let mode = if scenario.walk.is_static() {
        StateMode::Placement
    } else {
        StateMode::Movement
    };
    train(scenario, hyper, seed, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub uav: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub rows: Vec<TraceRow>,
    /// Mean shared reward per slot.
    pub mean_reward: f64,
    /// Time-averaged effective rate per user.
    pub user_rates: Vec<f64>,
    /// `paths[uav][t]`, including the starting position.
    pub paths: Vec<Vec<Point3>>,
}

impl EvalTrace {
    /// Writes `t,uav,x,y,z,action,reward`, optionally followed by
    /// `scenario_hash,seed` columns.
    pub fn write_csv<W: Write>(&self, audit: Option<(&str, u64)>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t", "uav", "x", "y", "z", "action", "reward"];
        if audit.is_some() {
            header.extend(["scenario_hash", "seed"]);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![
                r.t.to_string(),
                r.uav.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.z.to_string(),
                r.action.name().to_string(),
                r.reward.to_string(),
            ];
            if let Some((hash, seed)) = audit {
                row.extend([hash.to_string(), seed.to_string()]);
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rollout<F>(
    scenario: &LearningScenario,
    initial: &[Cell],
    mode: StateMode,
    horizon: usize,
    seed: u64,
    mut policy: F,
) -> Result<EvalTrace>
where
    F: FnMut(usize, usize) -> Action,
{
    scenario.validate()?;
    let n = scenario.n_uav;
    if initial.len() != n {
        return Err(Error::Contract(format!("{} start cells for {n} UAVs", initial.len())));
    }
    let area = scenario.grid.area();
    let mut walk: SimRng = substream(seed, purpose::EVAL, 0);
    let mut cells = initial.to_vec();
    let mut users = scenario.users.clone();
    let mut rows = Vec::with_capacity(horizon * n);
    let mut paths: Vec<Vec<Point3>> = scenario.positions(&cells).into_iter().map(|p| vec![p]).collect();
    let mut rates_sum = vec![0.0; users.len()];
    let mut total = 0.0;
    for t in 0..horizon {
        if mode == StateMode::Movement {
            for u in users.iter_mut() {
                *u = random_walk_step(*u, &scenario.walk, &area, &mut walk);
            }
        }
        let assign = nearest_assignment(&scenario.positions(&cells), &users);
        let actions: Vec<Action> = (0..n)
            .map(|v| policy(v, scenario.state(mode, &cells, &users, &assign, v)))
            .collect();
        cells = (0..n)
            .map(|v| scenario.grid.step(cells[v], actions[v]).unwrap_or(cells[v]))
            .collect();
        let pos = scenario.positions(&cells);
        let next_assign = nearest_assignment(&pos, &users);
        let rates = user_rates(&pos, &users, &next_assign, &scenario.channel, scenario.uav_power)?;
        let r = objective_value(&rates, scenario.objective);
        total += r;
        for (s, x) in rates_sum.iter_mut().zip(&rates) {
            *s += x;
        }
        for v in 0..n {
            rows.push(TraceRow {
                t,
                uav: v,
                x: pos[v].x,
                y: pos[v].y,
                z: pos[v].z,
                action: actions[v],
                reward: r,
            });
            paths[v].push(pos[v]);
        }
    }
    let h = horizon.max(1) as f64;
    Ok(EvalTrace {
        rows,
        mean_reward: total / h,
        user_rates: rates_sum.iter().map(|s| s / h).collect(),
        paths,
    })
}

/// Greedy rollout of a trained table from its start cells. In movement
/// mode the users walk with a stream keyed by `seed`, so seeds other than
/// the training seed give held-out traces.
pub fn evaluate_policy(table: &QTable, scenario: &LearningScenario, horizon: usize, seed: u64) -> Result<EvalTrace> {
    if table.grid_hash != scenario.grid.hash() || table.n_uav != scenario.n_uav {
        return Err(Error::Contract("Q-table does not match the scenario grid".into()));
    }
    rollout(scenario, &table.initial_cells, table.mode, horizon, seed, |v, s| table.greedy(v, s))
}

/// UAVs hold `initial` while users move as in [`evaluate_policy`].
pub fn evaluate_static(
    scenario: &LearningScenario,
    initial: &[Cell],
    mode: StateMode,
    horizon: usize,
    seed: u64,
) -> Result<EvalTrace> {
    rollout(scenario, initial, mode, horizon, seed, |_, _| Action::Stay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small_grid() -> GridWorld {
        GridWorld {
            bounds: Box3 {
                min: Point3::new(0.0, 0.0, 50.0),
                max: Point3::new(300.0, 300.0, 250.0),
            },
            cell: [100.0, 100.0, 100.0],
        }
    }

    #[test]
    fn grid_geometry() {
        let g = small_grid();
        g.validate().unwrap();
        assert_eq!(g.dims(), [3, 3, 2]);
        let c = Cell { ix: 2, iy: 0, iz: 1 };
        assert_eq!(g.center(c), Point3::new(250.0, 50.0, 200.0));
        assert_eq!(g.snap(g.center(c)), c);
        assert_eq!(g.cell_of(g.index(c)), c);
        assert_eq!(g.step(c, Action::PlusX), None);
        assert_eq!(g.step(c, Action::PlusZ), None);
        assert_eq!(g.step(c, Action::MinusX), Some(Cell { ix: 1, iy: 0, iz: 1 }));
        let bad = GridWorld {
            cell: [70.0, 100.0, 100.0],
            ..g
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn q_update_examples() {
        let g = small_grid();
        let mut hyper = RlHyper {
            alpha: AlphaSchedule::Constant(0.5),
            ..RlHyper::default()
        };
        let mut t = QTable::new(&g, StateMode::Placement, vec![Cell { ix: 0, iy: 0, iz: 0 }], hyper);
        q_update(&mut t, 0, 4, Action::PlusX, 1.0, 5, &hyper);
        assert_eq!(t.get(0, 4, Action::PlusX), 0.5);
        hyper.alpha = AlphaSchedule::Constant(1.0);
        hyper.gamma = 0.0;
        q_update(&mut t, 0, 3, Action::Stay, 0.7, 4, &hyper);
        assert_eq!(t.get(0, 3, Action::Stay), 0.7);
        q_update(&mut t, 0, 2, Action::Stay, 0.0, 2, &hyper);
        assert_eq!(t.get(0, 2, Action::Stay), 0.0);
    }

    #[test]
    fn epsilon_greedy_masks_and_ties() {
        let g = small_grid();
        let mut t = QTable::new(&g, StateMode::Placement, vec![Cell { ix: 0, iy: 0, iz: 0 }], RlHyper::default());
        let corner = g.index(Cell { ix: 2, iy: 2, iz: 1 });
        let mut rng = rng_from_seed(1);
        assert_eq!(epsilon_greedy(&t, 0, corner, 0.0, &mut rng), Action::Stay);
        let o = t.offset(0, corner);
        t.values[o + Action::MinusY.index()] = 2.0;
        t.values[o + Action::PlusX.index()] = 5.0; // illegal, never chosen
        assert_eq!(epsilon_greedy(&t, 0, corner, 0.0, &mut rng), Action::MinusY);
        for _ in 0..2000 {
            let a = epsilon_greedy(&t, 0, corner, 1.0, &mut rng);
            assert!(![Action::PlusX, Action::PlusY, Action::PlusZ].contains(&a));
        }
    }

    #[test]
    fn kmeans_examples() {
        let pts = [Point2::new(0.0, 0.0), Point2::new(2.0, 0.0), Point2::new(1.0, 3.0)];
        let one = kmeans(&pts, 1, 50, 1e-12, 1).unwrap();
        assert!(one.centroids[0].distance(Point2::new(1.0, 1.0)) < 1e-12);
        let two = kmeans(&pts[..2], 2, 50, 1e-12, 1).unwrap();
        assert_eq!(two.distortion, 0.0);
        assert_eq!(two.counts, vec![1, 1]);
        assert!(kmeans(&pts[..1], 2, 50, 1e-12, 1).is_err());
    }

    #[test]
    fn walk_zero_step_and_reflection() {
        let area = Rect::new(0.0, 10.0, 0.0, 10.0);
        let mut rng = rng_from_seed(3);
        let p = Point2::new(1.0, 9.5);
        let still = RandomWalkParams {
            step: 0.0,
            move_prob: 1.0,
        };
        assert_eq!(random_walk_step(p, &still, &area, &mut rng), p);
        let big = RandomWalkParams {
            step: 7.0,
            move_prob: 1.0,
        };
        let mut q = p;
        for _ in 0..10_000 {
            q = random_walk_step(q, &big, &area, &mut rng);
            assert!(area.contains(q));
        }
    }

    #[test]
    fn reward_examples() {
        let ch = ChannelParams::deterministic_los(1e-3, 1e-9);
        let user = [Point2::new(150.0, 150.0)];
        let near = reward(&[Point3::new(150.0, 150.0, 100.0)], &user, &[0], &ch, 1.0, Objective::MinRate).unwrap();
        let far = reward(&[Point3::new(450.0, 150.0, 100.0)], &user, &[0], &ch, 1.0, Objective::MinRate).unwrap();
        assert!(near > far);

        // two users under one UAV: the max-min value of the NOMA core
        let users = [Point2::new(0.0, 0.0), Point2::new(300.0, 0.0)];
        let uav = [Point3::new(0.0, 0.0, 100.0)];
        let r = reward(&uav, &users, &[0, 0], &ch, 1.0, Objective::MinRate).unwrap();
        let g: Vec<f64> = users.iter().map(|&u| channel::mean_gain(uav[0], u, &ch).unwrap()).collect();
        let expected = noma::max_min_power_allocation(&g, 1.0, 1e-9).unwrap().common_rate;
        assert!((r - expected).abs() < 1e-12);

        // an empty second cluster still takes half the time
        let uavs = [uav[0], Point3::new(5000.0, 0.0, 100.0)];
        let r2 = reward(&uavs, &users, &[0, 0], &ch, 1.0, Objective::MinRate).unwrap();
        assert!((r2 - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_episode_policy_is_tie_break_default() {
        let s = LearningScenario {
            users: vec![Point2::new(100.0, 100.0), Point2::new(500.0, 500.0)],
            ..LearningScenario::default()
        };
        let hyper = RlHyper {
            episodes: 0,
            ..RlHyper::default()
        };
        let r = train_placement(&s, &hyper, 5).unwrap();
        assert_eq!(r.final_cells, r.initial_cells);
        let trace = evaluate_policy(&r.table, &s, 5, 5).unwrap();
        assert!(trace.rows.iter().all(|row| row.action == Action::Stay));
    }

    #[test]
    fn qtable_json_roundtrip() {
        let g = small_grid();
        let start = Cell { ix: 1, iy: 1, iz: 0 };
        let mut t = QTable::new(&g, StateMode::Movement, vec![start, start], RlHyper::default());
        t.values[17] = 1.25;
        let back = QTable::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        let mut bad = t.clone();
        bad.grid_hash = "00".into();
        assert!(QTable::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }
}
