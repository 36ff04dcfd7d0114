use uavnoma::channel::{self, ChannelMode, ChannelParams, LinkType};
use uavnoma::geometry::{Point2, Point3};
use uavnoma::rng::{purpose, substream};

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn nakagami_power_has_gamma_moments() {
    for (m, omega) in [(1.0, 1.0), (2.0, 3.0), (100.0, 0.5)] {
        let params = ChannelParams {
            m,
            omega,
            ..ChannelParams::default()
        };
        let mut rng = substream(1, purpose::FADING, m as u64);
        let xs: Vec<f64> = (0..200_000)
            .map(|_| channel::sample_fading(&params, &mut rng).unwrap())
            .collect();
        let (mean, var) = moments(&xs);
        assert!((mean / omega - 1.0).abs() < 0.01, "m={m}: mean {mean}");
        // Gamma(m, omega/m): variance / mean^2 = 1/m
        let cv2 = var / (mean * mean);
        assert!((cv2 * m - 1.0).abs() < 0.1, "m={m}: var/mean^2 {cv2}");
    }
}

#[test]
fn invalid_nakagami_parameters_are_domain_errors() {
    let mut rng = substream(1, purpose::FADING, 0);
    for (m, omega) in [(0.4, 1.0), (2.0, 0.0), (f64::NAN, 1.0)] {
        let params = ChannelParams {
            m,
            omega,
            ..ChannelParams::default()
        };
        assert!(channel::sample_fading(&params, &mut rng).is_err());
    }
}

#[test]
fn faded_gain_averages_to_path_gain() {
    let params = ChannelParams::default();
    let uav = Point3::new(0.0, 0.0, 100.0);
    let user = Point2::new(250.0, -80.0);
    let d = (100.0f64 * 100.0 + 250.0 * 250.0 + 80.0 * 80.0).sqrt();
    let expected = params.beta0 * d.powf(-params.alpha_los) * params.omega;
    let mut rng = substream(2, purpose::FADING, 0);
    let xs: Vec<f64> = (0..100_000)
        .map(|_| channel::effective_gain(uav, user, &params, &mut rng).unwrap().power_gain)
        .collect();
    let (mean, _) = moments(&xs);
    assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
    let mg = channel::mean_gain(uav, user, &params).unwrap();
    assert!((mg / expected - 1.0).abs() < 1e-12);
}

#[test]
fn probabilistic_links_follow_the_sigmoid() {
    let params = ChannelParams {
        mode: ChannelMode::ProbabilisticLos,
        fading: false,
        ..ChannelParams::default()
    };
    let uav = Point3::new(0.0, 0.0, 120.0);
    let user = Point2::new(300.0, 0.0);
    let theta = (120.0f64 / 300.0).atan().to_degrees();
    let p = 1.0 / (1.0 + 9.61 * (-0.16 * (theta - 9.61)).exp());
    let n = 100_000;
    let mut rng = substream(3, purpose::FADING, 0);
    let mut los = 0usize;
    let mut sum = 0.0;
    for _ in 0..n {
        let link = channel::effective_gain(uav, user, &params, &mut rng).unwrap();
        los += usize::from(link.link_type == LinkType::Los);
        sum += link.power_gain;
    }
    let freq = los as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((freq - p).abs() < 4.0 * se, "LOS frequency {freq} vs {p}");
    let mean = sum / n as f64;
    let mg = channel::mean_gain(uav, user, &params).unwrap();
    assert!((mean / mg - 1.0).abs() < 0.01, "{mean} vs {mg}");
}

#[test]
fn nlos_never_beats_los_and_gain_falls_with_distance() {
    let params = ChannelParams::default();
    let mut last = f64::INFINITY;
    for i in 0..200 {
        let d = 1.0 + 10.0 * i as f64;
        let los = channel::path_gain(d, LinkType::Los, &params).unwrap();
        let nlos = channel::path_gain(d, LinkType::Nlos, &params).unwrap();
        assert!(nlos <= los);
        assert!(los < last);
        last = los;
    }
    assert!(channel::path_gain(0.0, LinkType::Los, &params).is_err());
}

#[test]
fn los_probability_rises_with_elevation() {
    let params = ChannelParams::default();
    let mut last = -1.0;
    for deg in 0..=90 {
        let p = channel::los_probability(deg as f64, &params).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(p > last);
        last = p;
    }
    assert!(channel::los_probability(-1.0, &params).is_err());
    assert!(channel::los_probability(90.5, &params).is_err());
}

#[test]
fn geometry_clamps_and_measures_elevation() {
    let (d, e) = channel::link_geometry(Point3::new(5.0, 5.0, 0.5), Point2::new(5.0, 5.0)).unwrap();
    assert_eq!(d, channel::MIN_DISTANCE_M);
    assert_eq!(e, 90.0);
    let (d, e) = channel::link_geometry(Point3::new(0.0, 0.0, 100.0), Point2::new(100.0, 0.0)).unwrap();
    assert!((d - 100.0 * 2f64.sqrt()).abs() < 1e-9);
    assert!((e - 45.0).abs() < 1e-9);
    assert!(channel::link_geometry(Point3::new(0.0, 0.0, 0.0), Point2::new(1.0, 0.0)).is_err());
}

#[test]
fn decibel_conversions() {
    assert!((channel::db_to_linear(-60.0) - 1e-6).abs() < 1e-18);
    assert!((channel::dbm_to_watts(-110.0) - 1e-14).abs() < 1e-26);
    assert!((channel::dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
}
