use rayon::prelude::*;

use uavnoma::channel::{self, ChannelParams};
use uavnoma::geometry::{GroundUser, Point2, Rect};
use uavnoma::rng::{purpose, substream};
use uavnoma::trajectory::{self, FlightConfig, OmaSchedule, OptimizerParams, TrajectorySolution};

const SEED: u64 = 77;

fn three_users(instance: u64, duration: f64) -> FlightConfig {
    let mut rng = substream(SEED, purpose::USERS, instance);
    FlightConfig {
        users: trajectory::random_users(3, &Rect::centered_square(1000.0), &mut rng),
        duration,
        channel: ChannelParams::deterministic_los(channel::db_to_linear(-60.0), channel::dbm_to_watts(-110.0)),
        ..FlightConfig::default()
    }
}

fn nearest_user(config: &FlightConfig, q: Point2) -> f64 {
    config
        .users
        .iter()
        .map(|u| q.distance(u.position))
        .fold(f64::INFINITY, f64::min)
}

/// Closest horizontal approach to any user over the whole flight.
fn closest_approach(config: &FlightConfig, sol: &TrajectorySolution) -> f64 {
    sol.waypoints
        .iter()
        .map(|&q| nearest_user(config, q))
        .fold(f64::INFINITY, f64::min)
}

/// The slowest segment touches the stretch of the flight nearest to the users.
fn slows_down_near_users(config: &FlightConfig, sol: &TrajectorySolution) -> bool {
    let speeds = sol.speeds(config.delta);
    let slowest = (0..speeds.len())
        .min_by(|&a, &b| speeds[a].total_cmp(&speeds[b]))
        .unwrap();
    let d: Vec<f64> = sol.waypoints.iter().map(|&q| nearest_user(config, q)).collect();
    let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
    d[slowest].min(d[slowest + 1]) <= d_min + config.max_step()
}

#[test]
fn noma_flight_slows_down_near_users() {
    let hits: usize = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let config = three_users(i, 25.0);
            let sol = trajectory::optimize_joint(&config).unwrap();
            usize::from(slows_down_near_users(&config, &sol))
        })
        .sum();
    assert!(hits >= 60, "slow-down near users on {hits}/100 seeds");
}

#[test]
fn balanced_oma_flies_closer_to_users_than_noma() {
    let (oma, noma): (Vec<f64>, Vec<f64>) = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut config = three_users(i, 25.0);
            let noma = trajectory::optimize_joint(&config).unwrap();
            config.optimizer.oma_schedule = OmaSchedule::Balanced;
            let oma = trajectory::oma_baseline(&config).unwrap();
            (closest_approach(&config, &oma), closest_approach(&config, &noma))
        })
        .unzip();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&oma) <= mean(&noma),
        "OMA closest approach {:.1} m, NOMA {:.1} m",
        mean(&oma),
        mean(&noma)
    );
}

#[test]
fn unbounded_speed_hovers_overhead() {
    let user = Point2::new(300.0, 100.0);
    let config = FlightConfig {
        users: vec![GroundUser::at(user.x, user.y)],
        v_max: 1e6,
        duration: 10.0,
        channel: ChannelParams::deterministic_los(1e-6, 1e-14),
        ..FlightConfig::default()
    };
    let sol = trajectory::optimize_joint(&config).unwrap();
    let n = config.segments();
    let rate = |q: Point2| {
        let d2 = config.altitude.powi(2) + q.distance(user).powi(2);
        (1.0 + config.channel.beta0 * config.p_max / (d2 * config.channel.noise_power)).log2()
    };
    // Endpoints are pinned; every other slot can sit overhead.
    let bound = (rate(config.start) + rate(config.end) + (n - 1) as f64 * rate(user)) / (n + 1) as f64;
    assert!(sol.min_avg_rate <= bound + 1e-9);
    assert!(sol.min_avg_rate >= bound * (1.0 - 1e-3), "{} vs {bound}", sol.min_avg_rate);
}

#[test]
fn solutions_are_deterministic_and_recomputable() {
    let config = three_users(3, 15.0);
    let a = trajectory::optimize_joint(&config).unwrap();
    let b = trajectory::optimize_joint(&config).unwrap();
    assert_eq!(a, b);
    let (rates, min) = trajectory::evaluate(&config, &a.waypoints, &a.powers).unwrap();
    assert_eq!(min, a.min_avg_rate);
    assert_eq!(rates, a.avg_rates);
    trajectory::check_constraints(&config, &a).unwrap();
}

#[test]
fn single_user_oma_equals_noma() {
    let config = FlightConfig {
        users: vec![GroundUser::at(-200.0, 50.0)],
        duration: 15.0,
        ..FlightConfig::default()
    };
    let noma = trajectory::optimize_joint(&config).unwrap();
    let oma = trajectory::oma_baseline(&config).unwrap();
    assert_eq!(noma.waypoints, oma.waypoints);
    assert!((noma.min_avg_rate - oma.min_avg_rate).abs() < 1e-12);
}

#[test]
fn outer_iterations_never_lower_the_objective() {
    let base = three_users(5, 20.0);
    let mut last = f64::NEG_INFINITY;
    for outer in [1, 2, 5, 20] {
        let config = FlightConfig {
            optimizer: OptimizerParams {
                max_outer: outer,
                rel_tol: 0.0,
                ..OptimizerParams::default()
            },
            ..base.clone()
        };
        let sol = trajectory::optimize_joint(&config).unwrap();
        assert!(sol.min_avg_rate >= last - 1e-12, "{outer}: {} < {last}", sol.min_avg_rate);
        last = sol.min_avg_rate;
    }
    let init = trajectory::init_trajectory(&base).unwrap();
    let power = trajectory::power_subproblem(&init, &base).unwrap();
    assert!(last >= power.min_avg_rate - 1e-12);
}
