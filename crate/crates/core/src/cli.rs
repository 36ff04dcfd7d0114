//! Scenario files, run orchestration and result files.
//!
//! A scenario file is TOML with a mandatory `seed` and exactly one mode
//! block: `[disc]`, `[ppp]`, `[fixed]`, `[trajectory]`, `[placement]` or
//! `[movement]`. Unknown keys are rejected. Linear fields that have a dB
//! twin (`beta0_db`, `kappa_nlos_db`, `noise_power_dbm`, `p_max_dbm`) accept
//! either form but not both.
//!
//! Every run writes `results.csv` with the columns
//! `scenario_hash,policy,user_class,metric,estimate,ci_halfwidth,trials,seed`,
//! a `summary.json`, mode-specific plot data and a `manifest.json`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{self, ChannelMode, ChannelParams};
use crate::geometry::{GroundUser, Point2, Point3, Rect};
use crate::learning::{
    self, Box3, EvalTrace, GridWorld, LearningScenario, Objective, RandomWalkParams, RlHyper, StateMode,
};
use crate::noma::SicMode;
use crate::rng::{derive_seed, purpose, substream};
use crate::spatial::{
    self, Accumulator, AssociationPolicy, DiscScenario, Estimate, FixedScenario, McConfig, McResult,
    PairingStrategy, PowerRule, PppScenario, StochasticScenario,
};
use crate::trajectory::{self, FlightConfig, OptimizerParams, TrajectorySolution};
use crate::{sha256_hex, Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "UAVNOMA_OUT";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const DEFAULT_OUT_ROOT: &str = "uavnoma-out";
const DEFAULT_TRIALS: u64 = 10_000;
const DEFAULT_EVAL_TRACES: usize = 20;
/// Tolerance used when counting instances where NOMA is not worse than OMA.
const DOMINANCE_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Raw file layout

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    seed: u64,
    trials: Option<u64>,
    episodes: Option<usize>,
    workers: Option<usize>,
    output: Option<PathBuf>,
    channel: Option<RawChannel>,
    disc: Option<RawDisc>,
    ppp: Option<RawPpp>,
    fixed: Option<RawFixed>,
    trajectory: Option<RawFlight>,
    placement: Option<RawLearning>,
    movement: Option<RawLearning>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    beta0: Option<f64>,
    beta0_db: Option<f64>,
    alpha_los: Option<f64>,
    alpha_nlos: Option<f64>,
    kappa_nlos: Option<f64>,
    kappa_nlos_db: Option<f64>,
    los_a: Option<f64>,
    los_b: Option<f64>,
    m: Option<f64>,
    omega: Option<f64>,
    noise_power: Option<f64>,
    noise_power_dbm: Option<f64>,
    mode: Option<ChannelMode>,
    fading: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawPower {
    Rule(String),
    Coefficients(Vec<f64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDisc {
    radius: Option<f64>,
    r_split: Option<f64>,
    altitude: Option<f64>,
    pairs: Option<usize>,
    total_power: Option<f64>,
    power: Option<RawPower>,
    center_threshold: Option<f64>,
    edge_threshold: Option<f64>,
    sic: Option<SicMode>,
    pairings: Option<Vec<PairingStrategy>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPpp {
    window_side: Option<f64>,
    lambda_u: Option<f64>,
    lambda_v: Option<f64>,
    altitude: Option<f64>,
    k: Option<usize>,
    uav_power: Option<f64>,
    power: Option<RawPower>,
    threshold: Option<f64>,
    sic: Option<SicMode>,
    guard_factor: Option<f64>,
    associations: Option<Vec<AssociationPolicy>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFixed {
    uav: [f64; 3],
    users: Vec<[f64; 2]>,
    total_power: Option<f64>,
    power: Option<RawPower>,
    threshold: Option<f64>,
    thresholds: Option<Vec<f64>>,
    sic: Option<SicMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlight {
    start: Option<[f64; 2]>,
    end: Option<[f64; 2]>,
    altitude: Option<f64>,
    duration: Option<f64>,
    durations: Option<Vec<f64>>,
    delta: Option<f64>,
    v_max: Option<f64>,
    p_max: Option<f64>,
    p_max_dbm: Option<f64>,
    users: Option<Vec<[f64; 2]>>,
    random_users: Option<usize>,
    user_region_side: Option<f64>,
    instances: Option<usize>,
    oma: Option<bool>,
    optimizer: Option<OptimizerParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    min: [f64; 3],
    max: [f64; 3],
    cell: [f64; 3],
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearning {
    grid: Option<RawGrid>,
    n_uav: Option<usize>,
    users: Option<Vec<[f64; 2]>>,
    random_users: Option<usize>,
    uav_power: Option<f64>,
    objective: Option<Objective>,
    initial_altitude: Option<f64>,
    horizon: Option<usize>,
    eval_traces: Option<usize>,
    walk: Option<RandomWalkParams>,
    rl: Option<RlHyper>,
}

// ---------------------------------------------------------------------------
// Resolved scenario

/// Subcommands that run a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Stochastic,
    Trajectory,
    Placement,
    Movement,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Stochastic => "stochastic",
            Command::Trajectory => "trajectory",
            Command::Placement => "placement",
            Command::Movement => "movement",
        }
    }
}

/// Ground users given explicitly or drawn from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserSpec {
    Explicit(Vec<Point2>),
    Random { count: usize, region: Rect },
}

impl UserSpec {
    /// Users for sweep instance `index`.
    pub fn resolve(&self, seed: u64, index: u64) -> Vec<Point2> {
        match self {
            UserSpec::Explicit(u) => u.clone(),
            UserSpec::Random { count, region } => {
                let mut rng = substream(seed, purpose::USERS, index);
                trajectory::random_users(*count, region, &mut rng)
                    .into_iter()
                    .map(|u| u.position)
                    .collect()
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            UserSpec::Explicit(u) => u.len(),
            UserSpec::Random { count, .. } => *count,
        }
    }

    fn placeholder(&self, at: Point2) -> Vec<Point2> {
        vec![at; self.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticRun {
    pub scenario: StochasticScenario,
    pub trials: u64,
    /// Disc mode: every listed strategy is evaluated and all pairs compared.
    pub pairings: Vec<PairingStrategy>,
    /// PPP mode: every listed policy is evaluated.
    pub associations: Vec<AssociationPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRun {
    /// Template; `users` and `duration` are filled per sweep point.
    pub config: FlightConfig,
    pub users: UserSpec,
    pub durations: Vec<f64>,
    pub instances: usize,
    /// Also solve the OMA baseline.
    pub oma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRun {
    /// Template; `users` is filled from `users`.
    pub scenario: LearningScenario,
    pub users: UserSpec,
    pub hyper: RlHyper,
    pub horizon: usize,
    pub eval_traces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ScenarioBody {
    Stochastic(StochasticRun),
    Trajectory(TrajectoryRun),
    Placement(LearningRun),
    Movement(LearningRun),
}

/// A validated scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub workers: usize,
    pub output: Option<PathBuf>,
    pub body: ScenarioBody,
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<u64>,
    pub episodes: Option<usize>,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Scenario {
    pub fn command(&self) -> Command {
        match &self.body {
            ScenarioBody::Stochastic(_) => Command::Stochastic,
            ScenarioBody::Trajectory(_) => Command::Trajectory,
            ScenarioBody::Placement(_) => Command::Placement,
            ScenarioBody::Movement(_) => Command::Movement,
        }
    }

    /// Name of the mode block, e.g. `disc` or `movement`.
    pub fn mode(&self) -> &'static str {
        match &self.body {
            ScenarioBody::Stochastic(s) => match s.scenario {
                StochasticScenario::Disc(_) => "disc",
                StochasticScenario::Ppp(_) => "ppp",
                StochasticScenario::Fixed(_) => "fixed",
            },
            ScenarioBody::Trajectory(_) => "trajectory",
            ScenarioBody::Placement(_) => "placement",
            ScenarioBody::Movement(_) => "movement",
        }
    }

    /// SHA-256 of the canonical JSON of the resolved body. Seed, workers and
    /// output location are excluded; key order in the file does not matter.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(&self.body)?;
        Ok(sha256_hex(value.to_string().as_bytes()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.output {
            self.output = Some(out.clone());
        }
        if let Some(t) = o.trials {
            match &mut self.body {
                ScenarioBody::Stochastic(s) => s.trials = t,
                _ => return Err(Error::config("trials", "only stochastic runs take trials")),
            }
        }
        if let Some(e) = o.episodes {
            match &mut self.body {
                ScenarioBody::Placement(l) | ScenarioBody::Movement(l) => l.hyper.episodes = e,
                _ => return Err(Error::config("episodes", "only learning runs take episodes")),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::config("workers", "workers >= 1"));
        }
        match &self.body {
            ScenarioBody::Stochastic(s) => {
                if s.trials < 1 {
                    return Err(Error::config("trials", "trials >= 1"));
                }
                if s.pairings.is_empty() || s.associations.is_empty() {
                    return Err(Error::config("strategies", "at least one strategy"));
                }
                s.scenario.validate()
            }
            ScenarioBody::Trajectory(t) => {
                if t.instances < 1 {
                    return Err(Error::config("trajectory.instances", "instances >= 1"));
                }
                if t.durations.is_empty() {
                    return Err(Error::config("trajectory.durations", "at least one duration"));
                }
                if t.users.len() < 1 {
                    return Err(Error::config("trajectory.users", "at least one user"));
                }
                for &d in &t.durations {
                    let mut c = t.config.clone();
                    c.duration = d;
                    c.users = t.users.placeholder(c.start).into_iter().map(user).collect();
                    c.validate()?;
                }
                Ok(())
            }
            ScenarioBody::Placement(l) | ScenarioBody::Movement(l) => {
                if l.hyper.episodes < 1 {
                    return Err(Error::config("episodes", "episodes >= 1"));
                }
                if l.hyper.steps < 1 {
                    return Err(Error::config("rl.steps", "steps >= 1"));
                }
                if l.horizon < 1 || l.eval_traces < 1 {
                    return Err(Error::config("learning.horizon", "horizon >= 1 and eval_traces >= 1"));
                }
                l.hyper.validate()?;
                let mut s = l.scenario.clone();
                s.users = match &l.users {
                    UserSpec::Explicit(u) => u.clone(),
                    other => {
                        let area = s.grid.area();
                        other.placeholder(Point2::new(area.x_min, area.y_min))
                    }
                };
                s.validate()
            }
        }
    }

    /// `--out`, then the file's `output`, then `$UAVNOMA_OUT/<mode>-<hash>-<seed>`.
    pub fn output_dir(&self) -> Result<PathBuf> {
        if let Some(p) = &self.output {
            return Ok(p.clone());
        }
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        let hash = self.hash()?;
        Ok(root.join(format!("{}-{}-{}", self.mode(), &hash[..12], self.seed)))
    }
}

fn user(p: Point2) -> GroundUser {
    GroundUser {
        position: p,
        rate_threshold: 0.0,
    }
}

fn point2(p: [f64; 2]) -> Point2 {
    Point2::new(p[0], p[1])
}

fn point3(p: [f64; 3]) -> Point3 {
    Point3::new(p[0], p[1], p[2])
}

fn either(field: &str, linear: Option<f64>, db: Option<f64>, convert: fn(f64) -> f64) -> Result<Option<f64>> {
    match (linear, db) {
        (Some(_), Some(_)) => Err(Error::config(field, "give the linear or the dB form, not both")),
        (Some(v), None) => Ok(Some(v)),
        (None, Some(d)) => Ok(Some(convert(d))),
        (None, None) => Ok(None),
    }
}

impl RawChannel {
    fn apply(&self, mut c: ChannelParams) -> Result<ChannelParams> {
        if let Some(v) = either("channel.beta0", self.beta0, self.beta0_db, channel::db_to_linear)? {
            c.beta0 = v;
        }
        if let Some(v) = either(
            "channel.kappa_nlos",
            self.kappa_nlos,
            self.kappa_nlos_db,
            channel::db_to_linear,
        )? {
            c.kappa_nlos = v;
        }
        if let Some(v) = either(
            "channel.noise_power",
            self.noise_power,
            self.noise_power_dbm,
            channel::dbm_to_watts,
        )? {
            c.noise_power = v;
        }
        let set = |dst: &mut f64, src: Option<f64>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        set(&mut c.alpha_los, self.alpha_los);
        set(&mut c.alpha_nlos, self.alpha_nlos);
        set(&mut c.los_a, self.los_a);
        set(&mut c.los_b, self.los_b);
        set(&mut c.m, self.m);
        set(&mut c.omega, self.omega);
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(f) = self.fading {
            c.fading = f;
        }
        c.validate()?;
        Ok(c)
    }
}

fn power_rule(field: &str, raw: Option<RawPower>, default: PowerRule) -> Result<PowerRule> {
    match raw {
        None => Ok(default),
        Some(RawPower::Rule(s)) if s == "max_min" => Ok(PowerRule::MaxMin),
        Some(RawPower::Rule(_)) => Err(Error::config(field, "\"max_min\" or a coefficient list")),
        Some(RawPower::Coefficients(c)) => {
            if c.iter().any(|&a| !(a >= 0.0)) || c.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::config(field, "coefficients >= 0 with sum <= 1"));
            }
            Ok(PowerRule::Fixed(c))
        }
    }
}

fn explicit_or_random(
    field: &str,
    users: Option<Vec<[f64; 2]>>,
    random: Option<usize>,
    region: Rect,
) -> Result<UserSpec> {
    match (users, random) {
        (Some(_), Some(_)) => Err(Error::config(field, "give users or random_users, not both")),
        (Some(u), None) => Ok(UserSpec::Explicit(u.into_iter().map(point2).collect())),
        (None, Some(count)) => Ok(UserSpec::Random { count, region }),
        (None, None) => Err(Error::config(field, "users or random_users required")),
    }
}

/// Parses and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let raw: RawFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let blocks = [
        raw.disc.is_some(),
        raw.ppp.is_some(),
        raw.fixed.is_some(),
        raw.trajectory.is_some(),
        raw.placement.is_some(),
        raw.movement.is_some(),
    ];
    if blocks.iter().filter(|&&b| b).count() != 1 {
        return Err(Error::config(
            "mode",
            "exactly one of [disc], [ppp], [fixed], [trajectory], [placement], [movement]",
        ));
    }
    let rc = raw.channel.unwrap_or_default();
    let stochastic_only = raw.disc.is_some() || raw.ppp.is_some() || raw.fixed.is_some();
    if raw.trials.is_some() && !stochastic_only {
        return Err(Error::config("trials", "only stochastic runs take trials"));
    }
    if raw.episodes.is_some() && raw.placement.is_none() && raw.movement.is_none() {
        return Err(Error::config("episodes", "only learning runs take episodes"));
    }
    let trials = raw.trials.unwrap_or(DEFAULT_TRIALS);
    let all_pairings = vec![
        PairingStrategy::NearNear,
        PairingStrategy::NearFar,
        PairingStrategy::Random,
    ];
    let all_associations = vec![
        AssociationPolicy::KNearest,
        AssociationPolicy::MeanPower,
        AssociationPolicy::MaxSinr,
    ];

    let body = if let Some(d) = raw.disc {
        let base = DiscScenario::default();
        let scenario = DiscScenario {
            radius: d.radius.unwrap_or(base.radius),
            r_split: d.r_split.unwrap_or(base.r_split),
            altitude: d.altitude.unwrap_or(base.altitude),
            pairs: d.pairs.unwrap_or(base.pairs),
            total_power: d.total_power.unwrap_or(base.total_power),
            channel: rc.apply(base.channel)?,
            power: power_rule("disc.power", d.power, base.power)?,
            center_threshold: d.center_threshold.unwrap_or(base.center_threshold),
            edge_threshold: d.edge_threshold.unwrap_or(base.edge_threshold),
            sic: d.sic.unwrap_or(base.sic),
        };
        ScenarioBody::Stochastic(StochasticRun {
            scenario: StochasticScenario::Disc(scenario),
            trials,
            pairings: d.pairings.unwrap_or(all_pairings),
            associations: vec![AssociationPolicy::KNearest],
        })
    } else if let Some(p) = raw.ppp {
        let base = PppScenario::default();
        let scenario = PppScenario {
            window: p.window_side.map(Rect::centered_square).unwrap_or(base.window),
            lambda_u: p.lambda_u.unwrap_or(base.lambda_u),
            lambda_v: p.lambda_v.unwrap_or(base.lambda_v),
            altitude: p.altitude.unwrap_or(base.altitude),
            k: p.k.unwrap_or(base.k),
            uav_power: p.uav_power.unwrap_or(base.uav_power),
            channel: rc.apply(base.channel)?,
            power: power_rule("ppp.power", p.power, base.power)?,
            threshold: p.threshold.unwrap_or(base.threshold),
            sic: p.sic.unwrap_or(base.sic),
            guard_factor: p.guard_factor.unwrap_or(base.guard_factor),
        };
        ScenarioBody::Stochastic(StochasticRun {
            scenario: StochasticScenario::Ppp(scenario),
            trials,
            pairings: vec![PairingStrategy::NearNear],
            associations: p.associations.unwrap_or(all_associations),
        })
    } else if let Some(f) = raw.fixed {
        let n = f.users.len();
        let thresholds = match (f.threshold, f.thresholds) {
            (Some(_), Some(_)) => {
                return Err(Error::config("fixed.thresholds", "give threshold or thresholds, not both"))
            }
            (Some(t), None) => vec![t; n],
            (None, Some(v)) => v,
            (None, None) => vec![0.5; n],
        };
        let scenario = FixedScenario {
            uav: point3(f.uav),
            users: f.users.into_iter().map(point2).collect(),
            total_power: f.total_power.unwrap_or(1.0),
            channel: rc.apply(ChannelParams::default())?,
            power: power_rule("fixed.power", f.power, PowerRule::MaxMin)?,
            thresholds,
            sic: f.sic.unwrap_or_default(),
        };
        ScenarioBody::Stochastic(StochasticRun {
            scenario: StochasticScenario::Fixed(scenario),
            trials,
            pairings: vec![PairingStrategy::NearNear],
            associations: vec![AssociationPolicy::KNearest],
        })
    } else if let Some(t) = raw.trajectory {
        let base = FlightConfig::default();
        let side = t.user_region_side.unwrap_or(1000.0);
        if !(side > 0.0) {
            return Err(Error::config("trajectory.user_region_side", "side > 0"));
        }
        let users = explicit_or_random(
            "trajectory.users",
            t.users,
            t.random_users,
            Rect::centered_square(side),
        )?;
        let durations = match (t.duration, t.durations) {
            (Some(_), Some(_)) => {
                return Err(Error::config("trajectory.durations", "give duration or durations, not both"))
            }
            (Some(d), None) => vec![d],
            (None, Some(v)) => v,
            (None, None) => vec![base.duration],
        };
        let p_max = either("trajectory.p_max", t.p_max, t.p_max_dbm, channel::dbm_to_watts)?;
        let config = FlightConfig {
            start: t.start.map(point2).unwrap_or(base.start),
            end: t.end.map(point2).unwrap_or(base.end),
            altitude: t.altitude.unwrap_or(base.altitude),
            duration: durations[0],
            delta: t.delta.unwrap_or(base.delta),
            v_max: t.v_max.unwrap_or(base.v_max),
            p_max: p_max.unwrap_or(base.p_max),
            users: Vec::new(),
            channel: rc.apply(base.channel)?,
            optimizer: t.optimizer.unwrap_or_default(),
        };
        ScenarioBody::Trajectory(TrajectoryRun {
            config,
            users,
            durations,
            instances: t.instances.unwrap_or(1),
            oma: t.oma.unwrap_or(true),
        })
    } else {
        let movement = raw.movement.is_some();
        let l = raw.placement.or(raw.movement).unwrap_or_default();
        let base = LearningScenario::default();
        let grid = match l.grid {
            Some(g) => GridWorld {
                bounds: Box3 {
                    min: point3(g.min),
                    max: point3(g.max),
                },
                cell: g.cell,
            },
            None => base.grid,
        };
        grid.validate()?;
        let users = explicit_or_random("learning.users", l.users, l.random_users, grid.area())?;
        let mut hyper = l.rl.unwrap_or_default();
        if let Some(e) = raw.episodes {
            hyper.episodes = e;
        }
        let scenario = LearningScenario {
            grid,
            n_uav: l.n_uav.unwrap_or(base.n_uav),
            users: Vec::new(),
            channel: rc.apply(base.channel)?,
            uav_power: l.uav_power.unwrap_or(base.uav_power),
            objective: l.objective.unwrap_or(base.objective),
            initial_altitude: l.initial_altitude.unwrap_or(base.initial_altitude),
            walk: l.walk.unwrap_or(base.walk),
        };
        let run = LearningRun {
            scenario,
            users,
            hyper,
            horizon: l.horizon.unwrap_or(hyper.steps),
            eval_traces: l.eval_traces.unwrap_or(if movement { DEFAULT_EVAL_TRACES } else { 1 }),
        };
        if movement {
            ScenarioBody::Movement(run)
        } else {
            ScenarioBody::Placement(run)
        }
    };

    let scenario = Scenario {
        seed: raw.seed,
        workers: raw.workers.unwrap_or_else(default_workers),
        output: raw.output,
        body,
    };
    scenario.validate()?;
    Ok(scenario)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// ---------------------------------------------------------------------------
// Running

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_hash: String,
    pub policy: String,
    pub user_class: String,
    pub metric: String,
    pub estimate: f64,
    pub ci_halfwidth: f64,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_hash: String,
    pub tool_version: String,
    pub mode: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_time_s: f64,
    pub output_dir: PathBuf,
    /// File names relative to `output_dir`, including the manifest.
    pub outputs: Vec<String>,
}

struct Emitter<'a> {
    hash: &'a str,
    seed: u64,
    rows: Vec<ResultRow>,
}

impl Emitter<'_> {
    fn row(&mut self, policy: &str, class: &str, metric: &str, estimate: f64, ci: f64, trials: u64) {
        self.rows.push(ResultRow {
            scenario_hash: self.hash.to_string(),
            policy: policy.to_string(),
            user_class: class.to_string(),
            metric: metric.to_string(),
            estimate,
            ci_halfwidth: ci,
            trials,
            seed: self.seed,
        });
    }

    fn estimate(&mut self, policy: &str, class: &str, metric: &str, e: &Estimate) {
        self.row(policy, class, metric, e.mean, e.ci_half_width, e.samples);
    }

    fn mc(&mut self, r: &McResult) {
        for row in &r.rows {
            self.estimate(&r.policy, &row.class, row.metric.name(), &row.estimate);
        }
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(fs::File::create(self.dir.join(name))?))
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        self.files.push(name.to_string());
        fs::write(self.dir.join(name), contents)?;
        Ok(())
    }
}

fn write_results<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario_hash",
        "policy",
        "user_class",
        "metric",
        "estimate",
        "ci_halfwidth",
        "trials",
        "seed",
    ])?;
    for r in rows {
        w.write_record([
            r.scenario_hash.clone(),
            r.policy.clone(),
            r.user_class.clone(),
            r.metric.clone(),
            r.estimate.to_string(),
            r.ci_halfwidth.to_string(),
            r.trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `results.csv`, or the one inside a run directory.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = if path.is_dir() { path.join(RESULTS_FILE) } else { path.to_path_buf() };
    let mut r = csv::Reader::from_path(file)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Runs a scenario into [`Scenario::output_dir`].
pub fn run(scenario: &Scenario) -> Result<RunManifest> {
    scenario.validate()?;
    let started = Instant::now();
    let hash = scenario.hash()?;
    let dir = scenario.output_dir()?;
    fs::create_dir_all(&dir)?;
    let mut out = Outputs { dir: dir.clone(), files: Vec::new() };
    let mut em = Emitter {
        hash: &hash,
        seed: scenario.seed,
        rows: Vec::new(),
    };
    let summary = match &scenario.body {
        ScenarioBody::Stochastic(s) => run_stochastic(s, scenario, &mut em)?,
        ScenarioBody::Trajectory(t) => run_trajectory(t, scenario, &mut em, &mut out)?,
        ScenarioBody::Placement(l) => run_learning(l, StateMode::Placement, scenario, &mut em, &mut out)?,
        ScenarioBody::Movement(l) => run_learning(l, StateMode::Movement, scenario, &mut em, &mut out)?,
    };
    let results = out.create(RESULTS_FILE)?;
    write_results(&em.rows, results)?;
    let summary = json!({
        "scenario_hash": hash,
        "mode": scenario.mode(),
        "seed": scenario.seed,
        "scenario": scenario.body,
        "results": summary,
    });
    out.write(SUMMARY_FILE, &serde_json::to_string_pretty(&summary)?)?;
    out.files.push(MANIFEST_FILE.to_string());
    let manifest = RunManifest {
        scenario_hash: hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: scenario.mode().to_string(),
        seed: scenario.seed,
        workers: scenario.workers,
        wall_time_s: started.elapsed().as_secs_f64(),
        output_dir: dir.clone(),
        outputs: out.files.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn run_stochastic(s: &StochasticRun, sc: &Scenario, em: &mut Emitter) -> Result<serde_json::Value> {
    let mut results = Vec::new();
    let mut comparisons = Vec::new();
    match &s.scenario {
        StochasticScenario::Disc(disc) => {
            for &pairing in &s.pairings {
                let config = McConfig { pairing, ..McConfig::default() };
                let r = spatial::mc_evaluate(&s.scenario, &config, s.trials, sc.seed, sc.workers)?;
                em.mc(&r);
                results.push(r);
            }
            for (i, &a) in s.pairings.iter().enumerate() {
                for &b in &s.pairings[i + 1..] {
                    let c = spatial::compare_pairings(disc, a, b, s.trials, sc.seed, sc.workers)?;
                    let policy = format!("{}-{}", a.name(), b.name());
                    em.estimate(&policy, "lead_pair", "sum_rate_diff", &c.sum_rate_diff);
                    em.estimate(&policy, "lead_pair", "noma_gain_diff", &c.noma_gain_diff);
                    comparisons.push(json!({ "a": a, "b": b, "comparison": c }));
                }
            }
        }
        StochasticScenario::Ppp(_) => {
            for &association in &s.associations {
                let config = McConfig { association, ..McConfig::default() };
                let r = spatial::mc_evaluate(&s.scenario, &config, s.trials, sc.seed, sc.workers)?;
                em.mc(&r);
                em.row(
                    &r.policy,
                    "all",
                    "csi_evaluations_per_trial",
                    r.csi_evaluations as f64 / r.trials as f64,
                    0.0,
                    r.trials,
                );
                results.push(r);
            }
        }
        StochasticScenario::Fixed(_) => {
            let r = spatial::mc_evaluate(&s.scenario, &McConfig::default(), s.trials, sc.seed, sc.workers)?;
            em.mc(&r);
            results.push(r);
        }
    }
    Ok(json!({ "monte_carlo": results, "pairing_comparisons": comparisons }))
}

struct FlightJob {
    instance: usize,
    duration: f64,
    config: FlightConfig,
    noma: TrajectorySolution,
    oma: Option<TrajectorySolution>,
    wall_time_s: f64,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Diagnostic(format!("thread pool: {e}")))
}

fn duration_label(d: f64) -> String {
    format!("T={d}")
}

fn solution_json(s: &TrajectorySolution) -> serde_json::Value {
    json!({
        "min_avg_rate": s.min_avg_rate,
        "avg_rates": s.avg_rates,
        "iterations": s.iterations,
        "converged": s.converged,
    })
}

fn run_trajectory(t: &TrajectoryRun, sc: &Scenario, em: &mut Emitter, out: &mut Outputs) -> Result<serde_json::Value> {
    let points: Vec<(usize, f64)> = (0..t.instances)
        .flat_map(|i| t.durations.iter().map(move |&d| (i, d)))
        .collect();
    let jobs: Vec<Result<FlightJob>> = pool(sc.workers)?.install(|| {
        points
            .par_iter()
            .map(|&(instance, duration)| {
                let started = Instant::now();
                let mut config = t.config.clone();
                config.duration = duration;
                config.users = t.users.resolve(sc.seed, instance as u64).into_iter().map(user).collect();
                let noma = trajectory::optimize_joint(&config)?;
                let oma = if t.oma { Some(trajectory::oma_baseline(&config)?) } else { None };
                Ok(FlightJob {
                    instance,
                    duration,
                    config,
                    noma,
                    oma,
                    wall_time_s: started.elapsed().as_secs_f64(),
                })
            })
            .collect()
    });
    let jobs: Vec<FlightJob> = jobs.into_iter().collect::<Result<_>>()?;
    let n = t.instances as u64;

    for &d in &t.durations {
        let label = duration_label(d);
        let at: Vec<&FlightJob> = jobs.iter().filter(|j| j.duration == d).collect();
        let mut noma = Accumulator::default();
        let mut oma = Accumulator::default();
        let mut gap = Accumulator::default();
        let mut dominant = 0usize;
        for j in &at {
            noma.push(j.noma.min_avg_rate);
            if let Some(o) = &j.oma {
                oma.push(o.min_avg_rate);
                gap.push(j.noma.min_avg_rate - o.min_avg_rate);
                if j.noma.min_avg_rate >= o.min_avg_rate - DOMINANCE_TOL {
                    dominant += 1;
                }
            }
        }
        em.estimate("noma", &label, "min_avg_rate", &noma.estimate());
        if t.oma {
            em.estimate("oma", &label, "min_avg_rate", &oma.estimate());
            em.estimate("noma-oma", &label, "min_avg_rate_gap", &gap.estimate());
            em.row("noma-oma", &label, "noma_not_worse_fraction", dominant as f64 / at.len() as f64, 0.0, n);
        }
        if t.instances == 1 {
            let j = at[0];
            let mut per_user = |policy: &str, s: &TrajectorySolution| {
                for (k, r) in s.avg_rates.iter().enumerate() {
                    em.row(policy, &format!("{label};user{}", k + 1), "avg_rate", *r, 0.0, 1);
                }
            };
            per_user("noma", &j.noma);
            if let Some(o) = &j.oma {
                per_user("oma", o);
            }
        }
    }

    let audit = Some((em.hash, sc.seed));
    for j in jobs.iter().filter(|j| j.instance == 0) {
        let w = out.create(&format!("waypoints_noma_T{}.csv", j.duration))?;
        trajectory::write_csv(&j.config, &j.noma, audit, w)?;
        if let Some(o) = &j.oma {
            let w = out.create(&format!("waypoints_oma_T{}.csv", j.duration))?;
            trajectory::write_csv(&j.config, o, audit, w)?;
        }
    }

    let points: Vec<serde_json::Value> = jobs
        .iter()
        .map(|j| {
            json!({
                "instance": j.instance,
                "duration": j.duration,
                "users": j.config.users.iter().map(|u| u.position).collect::<Vec<_>>(),
                "noma": solution_json(&j.noma),
                "oma": j.oma.as_ref().map(solution_json),
                "wall_time_s": j.wall_time_s,
            })
        })
        .collect();
    Ok(json!({ "points": points }))
}

fn run_learning(
    l: &LearningRun,
    mode: StateMode,
    sc: &Scenario,
    em: &mut Emitter,
    out: &mut Outputs,
) -> Result<serde_json::Value> {
    let mut scenario = l.scenario.clone();
    scenario.users = l.users.resolve(sc.seed, 0);
    let trained = match mode {
        StateMode::Placement => learning::train_placement(&scenario, &l.hyper, sc.seed)?,
        StateMode::Movement => learning::train_movement(&scenario, &l.hyper, sc.seed)?,
    };
    let table = &trained.table;
    out.write("qtable.json", &table.to_json()?)?;

    // Trace 0 replays the training seed; later traces are held out.
    let trace_seed = |i: usize| if i == 0 { sc.seed } else { derive_seed(sc.seed, purpose::SWEEP, i as u64) };
    let traces = l.eval_traces;
    let mut learned = Accumulator::default();
    let mut fixed = Accumulator::default();
    let mut diff = Accumulator::default();
    let mut first: Option<(EvalTrace, EvalTrace)> = None;
    for i in 0..traces {
        let a = learning::evaluate_policy(table, &scenario, l.horizon, trace_seed(i))?;
        let b = learning::evaluate_static(&scenario, &table.initial_cells, mode, l.horizon, trace_seed(i))?;
        learned.push(a.mean_reward);
        fixed.push(b.mean_reward);
        diff.push(a.mean_reward - b.mean_reward);
        if first.is_none() {
            first = Some((a, b));
        }
    }
    let (trace, baseline) = first.expect("eval_traces >= 1");
    let t = traces as u64;
    em.estimate("learned", "all", "mean_reward", &learned.estimate());
    em.estimate("static", "all", "mean_reward", &fixed.estimate());
    em.estimate("learned-static", "all", "mean_reward_diff", &diff.estimate());
    em.row("learned", "all", "max_training_reward", trained.max_reward, 0.0, l.hyper.episodes as u64);
    for (k, r) in trace.user_rates.iter().enumerate() {
        em.row("learned", &format!("user{}", k + 1), "avg_rate", *r, 0.0, 1);
    }
    for (k, r) in baseline.user_rates.iter().enumerate() {
        em.row("static", &format!("user{}", k + 1), "avg_rate", *r, 0.0, 1);
    }
    let audit = Some((em.hash, sc.seed));
    trace.write_csv(audit, out.create("trace.csv")?)?;
    baseline.write_csv(audit, out.create("trace_static.csv")?)?;

    Ok(json!({
        "users": scenario.users,
        "grid_hash": table.grid_hash,
        "initial_cells": trained.initial_cells,
        "final_cells": trained.final_cells,
        "final_positions": trained.final_positions,
        "max_training_reward": trained.max_reward,
        "episode_rewards": trained.episode_rewards,
        "eval_traces": t,
        "learned_mean_reward": learned.estimate(),
        "static_mean_reward": fixed.estimate(),
    }))
}

// ---------------------------------------------------------------------------
// Comparing runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy_a: String,
    pub policy_b: String,
    pub user_class: String,
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `a - b`.
    pub gain: f64,
    /// `(a - b) / |b|`; zero when both are zero.
    pub relative_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub hash_a: String,
    pub hash_b: String,
    /// Set when the two runs come from different scenarios.
    pub hash_mismatch: bool,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    /// Writes the paired table with the hashes of both runs on every row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "policy_a",
            "policy_b",
            "user_class",
            "metric",
            "a",
            "b",
            "gain",
            "relative_gain",
            "hash_a",
            "hash_b",
            "hash_mismatch",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.policy_a.clone(),
                r.policy_b.clone(),
                r.user_class.clone(),
                r.metric.clone(),
                r.a.to_string(),
                r.b.to_string(),
                r.gain.to_string(),
                r.relative_gain.to_string(),
                self.hash_a.clone(),
                self.hash_b.clone(),
                self.hash_mismatch.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn relative(gain: f64, b: f64) -> f64 {
    if gain == 0.0 {
        0.0
    } else {
        gain / b.abs()
    }
}

/// Pairs rows of two runs that share `metric` and user class. With a policy
/// filter only that policy's rows are taken from the run; without one,
/// rows are also paired by policy name.
pub fn compare(
    run_a: &Path,
    run_b: &Path,
    metric: &str,
    policy_a: Option<&str>,
    policy_b: Option<&str>,
) -> Result<Comparison> {
    let select = |rows: Vec<ResultRow>, policy: Option<&str>| -> Vec<ResultRow> {
        rows.into_iter()
            .filter(|r| r.metric == metric && policy.is_none_or(|p| r.policy == p))
            .collect()
    };
    let a_all = read_results(run_a)?;
    let b_all = read_results(run_b)?;
    let hash_of = |rows: &[ResultRow]| rows.first().map(|r| r.scenario_hash.clone()).unwrap_or_default();
    let hash_a = hash_of(&a_all);
    let hash_b = hash_of(&b_all);
    let a = select(a_all, policy_a);
    let b = select(b_all, policy_b);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(format!("metric `{metric}` absent from one of the runs")));
    }
    let by_policy = policy_a.is_none() && policy_b.is_none();
    let mut rows = Vec::new();
    for ra in &a {
        let hit = b
            .iter()
            .find(|rb| rb.user_class == ra.user_class && (!by_policy || rb.policy == ra.policy));
        if let Some(rb) = hit {
            let gain = ra.estimate - rb.estimate;
            rows.push(CompareRow {
                policy_a: ra.policy.clone(),
                policy_b: rb.policy.clone(),
                user_class: ra.user_class.clone(),
                metric: metric.to_string(),
                a: ra.estimate,
                b: rb.estimate,
                gain,
                relative_gain: relative(gain, rb.estimate),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract(format!("no rows of `{metric}` pair up between the runs")));
    }
    Ok(Comparison {
        metric: metric.to_string(),
        hash_mismatch: hash_a != hash_b,
        hash_a,
        hash_b,
        rows,
    })
}
