use uavnoma::channel::ChannelParams;
use uavnoma::geometry::{Point2, Point3, Rect, UavNode};
use uavnoma::noma::SicMode;
use uavnoma::rng::{purpose, substream};
use uavnoma::spatial::{
    self, AssociationPolicy, DiscScenario, FixedScenario, LinkMatrix, McConfig, Metric, PowerRule,
    StochasticScenario,
};

#[test]
fn disc_users_are_area_uniform() {
    let s = DiscScenario {
        radius: 1000.0,
        r_split: 400.0,
        pairs: 10,
        ..DiscScenario::default()
    };
    let mut rng = substream(5, purpose::GEOMETRY, 0);
    let (mut inner, mut outer) = (0.0, 0.0);
    let rounds = 100_000;
    for _ in 0..rounds {
        let (c, e) = spatial::sample_disc_users(&s, &mut rng);
        for p in &c {
            let r = p.norm();
            assert!(r <= s.r_split);
            inner += r * r;
        }
        for p in &e {
            let r = p.norm();
            assert!(r >= s.r_split - 1e-9 && r <= s.radius + 1e-9);
            outer += r * r;
        }
    }
    let n = (rounds * s.pairs) as f64;
    // Uniform on a disc of radius a: E[r^2] = a^2 / 2; on an annulus: (a^2 + b^2) / 2.
    let inner_expected = s.r_split * s.r_split / 2.0;
    let outer_expected = (s.r_split * s.r_split + s.radius * s.radius) / 2.0;
    assert!((inner / n / inner_expected - 1.0).abs() < 0.01);
    assert!((outer / n / outer_expected - 1.0).abs() < 0.01);
}

#[test]
fn hppp_counts_are_poisson() {
    let window = Rect::new(0.0, 100.0, 0.0, 50.0);
    let density = 10.0 / window.area();
    let mut rng = substream(6, purpose::GEOMETRY, 0);
    let counts: Vec<f64> = (0..100_000)
        .map(|_| {
            let pts = spatial::sample_hppp(&window, density, &mut rng);
            assert!(pts.iter().all(|&p| window.contains(p)));
            pts.len() as f64
        })
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean / 10.0 - 1.0).abs() < 0.02, "mean {mean}");
    assert!((var / mean - 1.0).abs() < 0.05, "var {var} mean {mean}");
}

#[test]
fn hppp_is_reproducible_per_seed() {
    let window = Rect::centered_square(1000.0);
    let a = spatial::sample_hppp(&window, 1e-4, &mut substream(7, purpose::GEOMETRY, 3));
    let b = spatial::sample_hppp(&window, 1e-4, &mut substream(7, purpose::GEOMETRY, 3));
    let c = spatial::sample_hppp(&window, 1e-4, &mut substream(7, purpose::GEOMETRY, 4));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn fixed(total_power: f64, threshold: f64) -> StochasticScenario {
    StochasticScenario::Fixed(FixedScenario {
        uav: Point3::new(0.0, 0.0, 100.0),
        users: vec![Point2::new(50.0, 0.0), Point2::new(-400.0, 200.0), Point2::new(0.0, 700.0)],
        total_power,
        channel: ChannelParams::default(),
        power: PowerRule::MaxMin,
        thresholds: vec![threshold; 3],
        sic: SicMode::Strict,
    })
}

#[test]
fn zero_threshold_never_outages() {
    let r = spatial::mc_outage(&fixed(1.0, 0.0), &McConfig::default(), 5000, 1, 1).unwrap();
    for row in &r.rows {
        assert_eq!(row.metric, Metric::Outage);
        assert_eq!(row.estimate.mean, 0.0, "{}", row.class);
    }
}

#[test]
fn outage_falls_as_power_rises() {
    let cfg = McConfig::default();
    let outage = |p: f64| {
        spatial::mc_outage(&fixed(p, 1.5), &cfg, 20_000, 11, 1)
            .unwrap()
            .get("all", Metric::Outage)
            .unwrap()
            .mean
    };
    let levels = [outage(0.01), outage(0.1), outage(1.0)];
    assert!(levels[0] >= levels[1] && levels[1] >= levels[2], "{levels:?}");
    assert!(levels[0] > levels[2], "{levels:?}");
}

#[test]
fn distance_and_mean_power_association_ignore_transmit_power() {
    let mut rng = substream(8, purpose::GEOMETRY, 0);
    let window = Rect::centered_square(2000.0);
    let users = spatial::sample_hppp(&window, 2e-5, &mut rng);
    let sites = spatial::sample_hppp(&window, 2e-6, &mut rng);
    assert!(!sites.is_empty());
    let nodes = |power: f64| -> Vec<UavNode> {
        sites
            .iter()
            .map(|p| UavNode {
                position: p.with_altitude(100.0),
                power,
            })
            .collect()
    };
    let channel = ChannelParams::default();
    let links = LinkMatrix::sample(&nodes(1.0), &users, &channel, &mut substream(8, purpose::FADING, 0)).unwrap();
    for policy in [AssociationPolicy::KNearest, AssociationPolicy::MeanPower] {
        let low = spatial::associate_with_links(policy, &nodes(0.01), &links, 3, channel.noise_power).unwrap();
        let high = spatial::associate_with_links(policy, &nodes(10.0), &links, 3, channel.noise_power).unwrap();
        assert_eq!(low, high, "{}", policy.name());
        assert_eq!(low.csi_evaluations, 0);
        for g in &low.groups {
            assert!(g.len() <= 3);
        }
    }
}

#[test]
fn worker_count_does_not_change_estimates() {
    let s = fixed(1.0, 1.0);
    let a = spatial::mc_evaluate(&s, &McConfig::default(), 3000, 4, 1).unwrap();
    let b = spatial::mc_evaluate(&s, &McConfig::default(), 3000, 4, 3).unwrap();
    assert_eq!(a, b);
}
