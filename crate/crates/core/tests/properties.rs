use proptest::prelude::*;

use uavnoma::channel::{self, ChannelParams, LinkType};
use uavnoma::geometry::{GroundUser, Point2, Point3, Rect};
use uavnoma::learning::{self, random_walk_step, Action, Cell, GridWorld, RandomWalkParams};
use uavnoma::noma::{self, NomaGroup, SicMode};
use uavnoma::rng::{purpose, substream};
use uavnoma::trajectory::{self, FlightConfig};

fn gains(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1e3, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn decoding_order_is_weakest_first(g in prop::collection::vec(0.0f64..10.0, 1..10)) {
        let order = noma::decoding_order(&g).unwrap();
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..g.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            prop_assert!(g[w[0]] < g[w[1]] || (g[w[0]] == g[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn max_min_split_is_a_fair_valid_allocation(g in gains(5), p in 0.01f64..10.0) {
        let split = noma::max_min_power_allocation(&g, p, 1.0).unwrap();
        let c = &split.group.coeffs;
        prop_assert!(c.iter().all(|&a| a >= 0.0));
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let report = noma::noma_rates(&g, &split.group, 1.0, &[], &[], SicMode::Idealized).unwrap();
        for r in &report.rates {
            prop_assert!(*r >= split.common_rate * (1.0 - 1e-6) - 1e-12, "{} < {}", r, split.common_rate);
        }
        prop_assert!(report.min_rate() <= split.common_rate * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn noma_rates_rise_with_total_power(g in gains(4), p in 0.01f64..10.0, scale in 1.0f64..100.0) {
        let order = noma::decoding_order(&g).unwrap();
        let n = order.len() as f64;
        let coeffs: Vec<f64> = (0..order.len()).map(|i| (n - i as f64) / (n * (n + 1.0) / 2.0)).collect();
        let low = NomaGroup::new(order.clone(), coeffs.clone(), p).unwrap();
        let high = NomaGroup::new(order, coeffs, p * scale).unwrap();
        let thresholds = vec![0.3; g.len()];
        let a = noma::noma_rates(&g, &low, 1.0, &[], &thresholds, SicMode::Strict).unwrap();
        let b = noma::noma_rates(&g, &high, 1.0, &[], &thresholds, SicMode::Strict).unwrap();
        for i in 0..g.len() {
            prop_assert!(b.rates[i] >= a.rates[i] - 1e-12);
            // Outage can only clear as power grows.
            prop_assert!(!b.outage[i] || a.outage[i]);
        }
    }

    #[test]
    fn los_probability_is_a_monotone_probability(a in 1.0f64..20.0, b in 0.01f64..1.0, e1 in 0.0f64..90.0, e2 in 0.0f64..90.0) {
        let params = ChannelParams { los_a: a, los_b: b, ..ChannelParams::default() };
        let p1 = channel::los_probability(e1, &params).unwrap();
        let p2 = channel::los_probability(e2, &params).unwrap();
        prop_assert!((0.0..=1.0).contains(&p1));
        if e1 <= e2 {
            prop_assert!(p1 <= p2);
        }
    }

    #[test]
    fn path_gain_falls_with_distance(d1 in 1.0f64..1e4, d2 in 1.0f64..1e4, alpha in 2.0f64..4.0, extra in 0.0f64..2.0) {
        let params = ChannelParams { alpha_los: alpha, alpha_nlos: alpha + extra, ..ChannelParams::default() };
        let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        for t in [LinkType::Los, LinkType::Nlos] {
            prop_assert!(channel::path_gain(near, t, &params).unwrap() >= channel::path_gain(far, t, &params).unwrap());
        }
        prop_assert!(channel::path_gain(near, LinkType::Nlos, &params).unwrap() <= channel::path_gain(near, LinkType::Los, &params).unwrap());
    }

    #[test]
    fn initial_trajectory_is_feasible(
        sx in -500.0f64..500.0, sy in -500.0f64..500.0,
        ex in -500.0f64..500.0, ey in -500.0f64..500.0,
        slack in 1.0f64..3.0,
    ) {
        let start = Point2::new(sx, sy);
        let end = Point2::new(ex, ey);
        let v_max = 50.0;
        let delta = FlightConfig::default().delta;
        // Whole slots, rounded up so the straight line is always reachable.
        let duration = ((start.distance(end) / v_max * slack / delta).ceil() * delta).max(2.0 * delta);
        let config = FlightConfig { start, end, duration, v_max, users: vec![GroundUser::at(0.0, 0.0)], ..FlightConfig::default() };
        let q = trajectory::init_trajectory(&config).unwrap();
        prop_assert_eq!(q.len(), config.segments() + 1);
        prop_assert_eq!(q[0], start);
        prop_assert_eq!(*q.last().unwrap(), end);
        for w in q.windows(2) {
            prop_assert!(w[0].distance(w[1]) <= config.max_step() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn grid_steps_stay_in_bounds(nx in 1usize..6, ny in 1usize..6, nz in 1usize..4, seed in 0u64..1000) {
        let grid = GridWorld {
            bounds: learning::Box3 { min: Point3::new(0.0, 0.0, 50.0), max: Point3::new(nx as f64 * 10.0, ny as f64 * 10.0, 50.0 + nz as f64 * 20.0) },
            cell: [10.0, 10.0, 20.0],
        };
        let mut rng = substream(seed, purpose::EXPLORE, 0);
        let mut c = Cell { ix: 0, iy: 0, iz: 0 };
        for _ in 0..50 {
            let legal = grid.legal(c);
            prop_assert!(legal[0]);
            let a = Action::ALL[rand::Rng::random_range(&mut rng, 0..7)];
            match grid.step(c, a) {
                Some(next) => {
                    prop_assert!(next.ix < nx && next.iy < ny && next.iz < nz);
                    prop_assert_eq!(grid.snap(grid.center(next)), next);
                    prop_assert_eq!(grid.cell_of(grid.index(next)), next);
                    c = next;
                }
                None => prop_assert!(!legal[a.index()]),
            }
        }
    }

    #[test]
    fn random_walk_stays_in_the_area(step in 0.0f64..200.0, prob in 0.0f64..=1.0, seed in 0u64..1000, x in 0.0f64..100.0, y in 0.0f64..60.0) {
        let area = Rect::new(0.0, 100.0, 0.0, 60.0);
        let params = RandomWalkParams { step, move_prob: prob };
        let mut rng = substream(seed, purpose::WALK, 0);
        let mut p = Point2::new(x, y);
        for _ in 0..200 {
            p = random_walk_step(p, &params, &area, &mut rng);
            prop_assert!(area.contains(p), "{:?}", p);
        }
    }

    #[test]
    fn kmeans_labels_point_to_the_nearest_centroid(
        pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 4..40),
        k in 1usize..4,
        seed in 0u64..100,
    ) {
        let pts: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
        let km = learning::kmeans(&pts, k, 200, 0.0, seed).unwrap();
        prop_assert_eq!(km.centroids.len(), k);
        prop_assert_eq!(km.counts.iter().sum::<usize>(), pts.len());
        for (p, &l) in pts.iter().zip(&km.labels) {
            let own = p.distance(km.centroids[l]);
            for c in &km.centroids {
                prop_assert!(own <= p.distance(*c) + 1e-9);
            }
        }
        prop_assert!(km.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}
