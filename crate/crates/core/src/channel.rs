//! Air-to-ground channel model.
//!
//! Large-scale gain follows a power law with separate LOS/NLOS exponents.
//! The LOS probability is an elevation-angle sigmoid
//! `1 / (1 + a * exp(-b * (theta - a)))`, and small-scale fading is
//! Nakagami-m, i.e. the received power gain is Gamma(m, omega / m).
//!
//! All gains are linear power ratios. Angles are in degrees.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3};

/// Links closer than this are evaluated at this distance.
pub const MIN_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkType {
    Los,
    Nlos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Every link is LOS.
    LosOnly,
    /// Link type drawn per realization from [`los_probability`].
    ProbabilisticLos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Linear reference gain at 1 m.
    pub beta0: f64,
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    /// Extra linear attenuation applied to NLOS links.
    pub kappa_nlos: f64,
    pub los_a: f64,
    pub los_b: f64,
    /// Nakagami shape.
    pub m: f64,
    /// Mean fading power.
    pub omega: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
    pub mode: ChannelMode,
    /// When false the channel is deterministic path loss.
    pub fading: bool,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            beta0: 1e-3,
            alpha_los: 2.0,
            alpha_nlos: 3.5,
            kappa_nlos: 0.01,
            los_a: 9.61,
            los_b: 0.16,
            m: 2.0,
            omega: 1.0,
            noise_power: 1e-12,
            mode: ChannelMode::LosOnly,
            fading: true,
        }
    }
}

impl ChannelParams {
    /// Deterministic LOS-only channel with fading disabled.
    pub fn deterministic_los(beta0: f64, noise_power: f64) -> Self {
        Self {
            beta0,
            noise_power,
            mode: ChannelMode::LosOnly,
            fading: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, constraint: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("channel.{field}"), constraint))
            }
        };
        check(self.beta0 > 0.0 && self.beta0.is_finite(), "beta0", "beta0 > 0")?;
        check(self.alpha_los >= 2.0, "alpha_los", "alpha_los >= 2")?;
        check(
            self.alpha_nlos >= self.alpha_los,
            "alpha_nlos",
            "alpha_nlos >= alpha_los",
        )?;
        check(
            self.kappa_nlos > 0.0 && self.kappa_nlos <= 1.0,
            "kappa_nlos",
            "0 < kappa_nlos <= 1",
        )?;
        check(self.los_a > 0.0, "los_a", "los_a > 0")?;
        check(self.los_b > 0.0, "los_b", "los_b > 0")?;
        check(self.m >= 0.5, "m", "m >= 0.5")?;
        check(self.omega > 0.0, "omega", "omega > 0")?;
        check(self.noise_power > 0.0, "noise_power", "noise_power > 0")?;
        Ok(())
    }
}

/// One realized link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSample {
    pub distance: f64,
    pub elevation_deg: f64,
    pub link_type: LinkType,
    /// Path gain times fading gain.
    pub power_gain: f64,
}

/// LOS probability at the given elevation angle.
pub fn los_probability(elevation_deg: f64, params: &ChannelParams) -> Result<f64> {
    if !(0.0..=90.0).contains(&elevation_deg) {
        return Err(Error::Domain(format!(
            "elevation {elevation_deg} deg outside [0, 90]"
        )));
    }
    let a = params.los_a;
    let b = params.los_b;
    Ok(1.0 / (1.0 + a * (-b * (elevation_deg - a)).exp()))
}

/// Large-scale power gain at `distance` meters.
pub fn path_gain(distance: f64, link_type: LinkType, params: &ChannelParams) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::Domain(format!("distance {distance} m must be > 0")));
    }
    Ok(match link_type {
        LinkType::Los => params.beta0 * distance.powf(-params.alpha_los),
        LinkType::Nlos => params.kappa_nlos * params.beta0 * distance.powf(-params.alpha_nlos),
    })
}

/// Draws a Nakagami-m power gain (squared envelope).
pub fn sample_fading<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Result<f64> {
    if !(params.m >= 0.5) || !(params.omega > 0.0) {
        return Err(Error::Domain(format!(
            "Nakagami parameters m={} omega={} require m >= 0.5 and omega > 0",
            params.m, params.omega
        )));
    }
    let gamma = Gamma::new(params.m, params.omega / params.m)
        .map_err(|e| Error::Domain(format!("gamma distribution: {e}")))?;
    Ok(gamma.sample(rng))
}

/// Distance (clamped) and elevation angle between a UAV and a ground user.
pub fn link_geometry(uav: Point3, user: Point2) -> Result<(f64, f64)> {
    if !(uav.z > 0.0) {
        return Err(Error::Domain(format!(
            "UAV altitude {} m must be > 0",
            uav.z
        )));
    }
    let horizontal = uav.ground().distance(user);
    let distance = horizontal.hypot(uav.z);
    if distance == 0.0 {
        return Err(Error::Domain("coincident UAV and user positions".into()));
    }
    let elevation = uav.z.atan2(horizontal).to_degrees().clamp(0.0, 90.0);
    Ok((distance.max(MIN_DISTANCE_M), elevation))
}

/// Composite gain for one realization: link-type draw (probabilistic mode),
/// path gain, and fading (unless disabled).
pub fn effective_gain<R: Rng + ?Sized>(
    uav: Point3,
    user: Point2,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<LinkSample> {
    let (distance, elevation_deg) = link_geometry(uav, user)?;
    let link_type = match params.mode {
        ChannelMode::LosOnly => LinkType::Los,
        ChannelMode::ProbabilisticLos => {
            let p = los_probability(elevation_deg, params)?;
            if rng.random::<f64>() < p {
                LinkType::Los
            } else {
                LinkType::Nlos
            }
        }
    };
    let mut power_gain = path_gain(distance, link_type, params)?;
    if params.fading {
        power_gain *= sample_fading(params, rng)?;
    }
    Ok(LinkSample {
        distance,
        elevation_deg,
        link_type,
        power_gain,
    })
}

/// Expected gain with fading and link type averaged out.
pub fn mean_gain(uav: Point3, user: Point2, params: &ChannelParams) -> Result<f64> {
    let (distance, elevation_deg) = link_geometry(uav, user)?;
    let los = path_gain(distance, LinkType::Los, params)?;
    let large_scale = match params.mode {
        ChannelMode::LosOnly => los,
        ChannelMode::ProbabilisticLos => {
            let p = los_probability(elevation_deg, params)?;
            p * los + (1.0 - p) * path_gain(distance, LinkType::Nlos, params)?
        }
    };
    Ok(if params.fading {
        large_scale * params.omega
    } else {
        large_scale
    })
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn urban() -> ChannelParams {
        ChannelParams::default()
    }

    #[test]
    fn los_probability_at_zenith() {
        // 1 / (1 + 9.61 * exp(-0.16 * 80.39))
        let expected = 1.0 / (1.0 + 9.61 * (-0.16f64 * (90.0 - 9.61)).exp());
        let p = los_probability(90.0, &urban()).unwrap();
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn los_probability_at_sigmoid_centre() {
        let p = los_probability(9.61, &urban()).unwrap();
        assert_eq!(p, 1.0 / (1.0 + 9.61));
        assert!((p - 0.09426).abs() < 1e-5);
    }

    #[test]
    fn los_probability_rejects_bad_angles() {
        assert!(matches!(los_probability(-0.1, &urban()), Err(Error::Domain(_))));
        assert!(matches!(los_probability(90.5, &urban()), Err(Error::Domain(_))));
        assert!(los_probability(60.0, &urban()).unwrap() > los_probability(10.0, &urban()).unwrap());
    }

    #[test]
    fn path_gain_values() {
        let p = urban();
        assert!((path_gain(100.0, LinkType::Los, &p).unwrap() - 1e-7).abs() < 1e-22);
        assert_eq!(path_gain(1.0, LinkType::Los, &p).unwrap(), p.beta0);
        for d in [1.0, 3.0, 50.0, 900.0] {
            assert!(
                path_gain(d, LinkType::Nlos, &p).unwrap() <= path_gain(d, LinkType::Los, &p).unwrap()
            );
        }
        assert!(path_gain(0.0, LinkType::Los, &p).is_err());
        assert!(path_gain(-3.0, LinkType::Nlos, &p).is_err());
    }

    #[test]
    fn fading_rejects_bad_shape() {
        let mut rng = rng_from_seed(1);
        let p = ChannelParams { m: 0.3, ..urban() };
        assert!(sample_fading(&p, &mut rng).is_err());
        let p = ChannelParams { omega: 0.0, ..urban() };
        assert!(sample_fading(&p, &mut rng).is_err());
    }

    #[test]
    fn deterministic_overhead_gain() {
        let p = ChannelParams {
            fading: false,
            ..urban()
        };
        let mut rng = rng_from_seed(3);
        let s = effective_gain(Point3::new(0.0, 0.0, 100.0), Point2::new(0.0, 0.0), &p, &mut rng)
            .unwrap();
        assert_eq!(s.power_gain, p.beta0 * 100f64.powf(-p.alpha_los));
        assert_eq!(s.elevation_deg, 90.0);
        assert_eq!(s.link_type, LinkType::Los);
    }

    #[test]
    fn effective_gain_is_seed_deterministic() {
        let p = ChannelParams {
            mode: ChannelMode::ProbabilisticLos,
            ..urban()
        };
        let uav = Point3::new(10.0, -5.0, 80.0);
        let user = Point2::new(300.0, 20.0);
        let a = effective_gain(uav, user, &p, &mut rng_from_seed(11)).unwrap();
        let b = effective_gain(uav, user, &p, &mut rng_from_seed(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn geometry_errors_and_clamp() {
        let p = urban();
        let mut rng = rng_from_seed(0);
        assert!(effective_gain(Point3::new(0.0, 0.0, 0.0), Point2::new(0.0, 0.0), &p, &mut rng).is_err());
        assert!(effective_gain(Point3::new(0.0, 0.0, -1.0), Point2::new(5.0, 0.0), &p, &mut rng).is_err());
        let (d, _) = link_geometry(Point3::new(0.0, 0.0, 0.25), Point2::new(0.0, 0.0)).unwrap();
        assert_eq!(d, MIN_DISTANCE_M);
    }

    #[test]
    fn db_conversions() {
        assert!((db_to_linear(-30.0) - 1e-3).abs() < 1e-18);
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
        assert!((dbm_to_watts(-90.0) - 1e-12).abs() < 1e-24);
    }

    #[test]
    fn defaults_validate() {
        urban().validate().unwrap();
        let bad = ChannelParams {
            alpha_nlos: 1.5,
            ..urban()
        };
        assert!(bad.validate().is_err());
    }
}
