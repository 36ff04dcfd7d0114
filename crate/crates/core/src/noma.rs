//! Downlink power-domain NOMA: superposition power split, SIC decoding
//! order, per-stage SINRs, OMA/TDMA baselines and hybrid cluster schedules.
//!
//! Rates are in bits/s/Hz. Gains are linear power gains; with a `noise`
//! argument of 1 they can be read as per-watt SNRs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRACTION_TOL: f64 = 1e-9;

/// How strictly successive decoding is checked for outage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SicMode {
    /// Earlier-decoded messages are always cancelled perfectly.
    #[default]
    Idealized,
    /// Every earlier decoding stage must meet its owner's threshold.
    Strict,
}

/// Co-channel user set. `user_ids[0]` is decoded first at every receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NomaGroup {
    pub user_ids: Vec<usize>,
    /// Power fraction for each entry of `user_ids`.
    pub coeffs: Vec<f64>,
    pub total_power: f64,
}

impl NomaGroup {
    pub fn new(user_ids: Vec<usize>, coeffs: Vec<f64>, total_power: f64) -> Result<Self> {
        let g = Self {
            user_ids,
            coeffs,
            total_power,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_ids.len() != self.coeffs.len() {
            return Err(Error::Contract(format!(
                "{} users but {} power coefficients",
                self.user_ids.len(),
                self.coeffs.len()
            )));
        }
        if self.coeffs.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Contract("power coefficients must be >= 0".into()));
        }
        let sum: f64 = self.coeffs.iter().sum();
        if sum > 1.0 + FRACTION_TOL {
            return Err(Error::Contract(format!(
                "power coefficients sum to {sum} > 1"
            )));
        }
        if !(self.total_power >= 0.0) {
            return Err(Error::Contract("total power must be >= 0".into()));
        }
        let mut seen = self.user_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate user in NOMA group".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    /// Watts allotted to each member.
    pub fn powers(&self) -> Vec<f64> {
        self.coeffs.iter().map(|a| a * self.total_power).collect()
    }
}

/// Per-member results, aligned with the group's decoding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub user_ids: Vec<usize>,
    pub rates: Vec<f64>,
    /// `stage_sinr[j][i]` is the SINR at member j's receiver when decoding
    /// member i's message (i <= j). The last entry is the member's own stage.
    pub stage_sinr: Vec<Vec<f64>>,
    pub outage: Vec<bool>,
}

impl RateReport {
    pub fn min_rate(&self) -> f64 {
        self.rates.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn rate_of(&self, user: usize) -> Option<f64> {
        self.user_ids
            .iter()
            .position(|&u| u == user)
            .map(|i| self.rates[i])
    }
}

fn shannon(sinr: f64) -> f64 {
    (1.0 + sinr).log2()
}

/// SIC order: user indices by ascending gain (weakest first), ties by index.
pub fn decoding_order(gains: &[f64]) -> Result<Vec<usize>> {
    if gains.is_empty() {
        return Err(Error::Domain("decoding order of an empty user set".into()));
    }
    if gains.iter().any(|&g| !(g >= 0.0)) {
        return Err(Error::Domain("channel gains must be >= 0".into()));
    }
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]).then(a.cmp(&b)));
    Ok(order)
}

fn lookup(values: &[f64], user: usize, what: &str) -> Result<f64> {
    if values.is_empty() {
        return Ok(0.0);
    }
    values
        .get(user)
        .copied()
        .ok_or_else(|| Error::Contract(format!("no {what} for user {user}")))
}

/// SIC rates of a NOMA group.
///
/// `gains`, `external_interference` and `thresholds` are indexed by user id;
/// the latter two may be empty (treated as zeros).
pub fn noma_rates(
    gains: &[f64],
    group: &NomaGroup,
    noise: f64,
    external_interference: &[f64],
    thresholds: &[f64],
    mode: SicMode,
) -> Result<RateReport> {
    group.validate()?;
    if !(noise > 0.0) {
        return Err(Error::Contract("noise power must be > 0".into()));
    }
    let n = group.len();
    let p = group.total_power;
    // tail[i] = sum of coefficients decoded after position i
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + group.coeffs[i];
    }
    let mut stage_sinr = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    for (j, &user) in group.user_ids.iter().enumerate() {
        let g = lookup(gains, user, "gain")?;
        if gains.is_empty() || !(g >= 0.0) {
            return Err(Error::Contract(format!("invalid gain for user {user}")));
        }
        let floor = noise + lookup(external_interference, user, "interference")?;
        let stages: Vec<f64> = (0..=j)
            .map(|i| group.coeffs[i] * p * g / (p * g * tail[i + 1] + floor))
            .collect();
        rates.push(shannon(stages[j]));
        stage_sinr.push(stages);
    }
    let mut report = RateReport {
        user_ids: group.user_ids.clone(),
        rates,
        stage_sinr,
        outage: vec![false; n],
    };
    let aligned: Vec<f64> = group
        .user_ids
        .iter()
        .map(|&u| lookup(thresholds, u, "threshold"))
        .collect::<Result<_>>()?;
    report.outage = sic_outage(&report, &aligned, mode)?;
    Ok(report)
}

/// Outage flags; `thresholds` is aligned with the report's member order.
pub fn sic_outage(report: &RateReport, thresholds: &[f64], mode: SicMode) -> Result<Vec<bool>> {
    if thresholds.len() != report.user_ids.len() {
        return Err(Error::Contract(format!(
            "{} thresholds for {} users",
            thresholds.len(),
            report.user_ids.len()
        )));
    }
    Ok(report
        .stage_sinr
        .iter()
        .enumerate()
        .map(|(j, stages)| {
            let own = shannon(stages[stages.len() - 1]) < thresholds[j];
            match mode {
                SicMode::Idealized => own,
                SicMode::Strict => {
                    own || stages[..stages.len() - 1]
                        .iter()
                        .enumerate()
                        .any(|(i, &s)| shannon(s) < thresholds[i])
                }
            }
        })
        .collect())
}

/// TDMA baseline: user k gets full power for `fractions[k]` of the time.
pub fn oma_rates(
    gains: &[f64],
    total_power: f64,
    noise: f64,
    fractions: &[f64],
    thresholds: &[f64],
) -> Result<RateReport> {
    if gains.len() != fractions.len() {
        return Err(Error::Contract(format!(
            "{} gains but {} slot fractions",
            gains.len(),
            fractions.len()
        )));
    }
    check_fractions(fractions)?;
    if !(noise > 0.0) {
        return Err(Error::Contract("noise power must be > 0".into()));
    }
    let snr: Vec<f64> = gains.iter().map(|g| total_power * g / noise).collect();
    let rates: Vec<f64> = snr
        .iter()
        .zip(fractions)
        .map(|(&s, &f)| f * shannon(s))
        .collect();
    let outage = rates
        .iter()
        .enumerate()
        .map(|(k, &r)| Ok(r < lookup(thresholds, k, "threshold")?))
        .collect::<Result<_>>()?;
    Ok(RateReport {
        user_ids: (0..gains.len()).collect(),
        rates,
        stage_sinr: snr.into_iter().map(|s| vec![s]).collect(),
        outage,
    })
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Contract("time fractions must be >= 0".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > FRACTION_TOL {
        return Err(Error::Contract(format!(
            "time fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Max-min power split and the common rate it achieves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSplit {
    /// Members `0..n` in decoding order with their coefficients.
    pub group: NomaGroup,
    pub common_rate: f64,
}

/// Coefficients maximizing the minimum SIC rate (no external interference).
pub fn max_min_power_allocation(gains: &[f64], total_power: f64, noise: f64) -> Result<PowerSplit> {
    max_min_power_allocation_with_interference(gains, total_power, noise, &[])
}

/// Max-min split when user k also sees `external_interference[k]` watts.
///
/// Bisection on the common SINR target; for a target the minimal
/// coefficients follow from the SIC chain, starting at the last-decoded
/// user. The leftover power goes to the first-decoded user, whose signal is
/// cancelled by everyone else, so it cannot lower any other rate.
pub fn max_min_power_allocation_with_interference(
    gains: &[f64],
    total_power: f64,
    noise: f64,
    external_interference: &[f64],
) -> Result<PowerSplit> {
    if gains.is_empty() {
        return Err(Error::Contract("max-min allocation needs >= 1 user".into()));
    }
    if !(noise > 0.0) || !(total_power >= 0.0) {
        return Err(Error::Contract("noise must be > 0 and power >= 0".into()));
    }
    let n = gains.len();
    let snr: Vec<f64> = (0..n)
        .map(|k| {
            Ok(total_power * gains[k] / (noise + lookup(external_interference, k, "interference")?))
        })
        .collect::<Result<_>>()?;
    let order = decoding_order(&snr)?;

    let fill = |gamma: f64, coeffs: &mut [f64]| -> f64 {
        let mut later = 0.0;
        for &k in order.iter().rev() {
            let a = gamma * (later + 1.0 / snr[k]);
            coeffs[k] = a;
            later += a;
        }
        later
    };

    let mut coeffs = vec![0.0; n];
    let weakest = snr[order[0]];
    if weakest > 0.0 {
        let (mut lo, mut hi) = (0.0, weakest);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if fill(mid, &mut coeffs) <= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        fill(lo, &mut coeffs);
    }
    let others: f64 = order[1..].iter().map(|&k| coeffs[k]).sum();
    coeffs[order[0]] = (1.0 - others).max(0.0);

    let group = NomaGroup {
        user_ids: order.clone(),
        coeffs: order.iter().map(|&k| coeffs[k]).collect(),
        total_power,
    };
    let report = noma_rates(
        gains,
        &group,
        noise,
        external_interference,
        &[],
        SicMode::Idealized,
    )?;
    Ok(PowerSplit {
        common_rate: report.min_rate(),
        group,
    })
}

/// Hybrid scheme: NOMA inside each cluster, TDMA across clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSchedule {
    pub clusters: Vec<NomaGroup>,
    pub fractions: Vec<f64>,
}

/// Builds the schedule and returns the per-user effective rates
/// (cluster fraction times intra-cluster NOMA rate), keyed by user id.
pub fn cluster_schedule(
    clusters: Vec<NomaGroup>,
    fractions: Vec<f64>,
    gains: &[f64],
    noise: f64,
) -> Result<(ClusterSchedule, BTreeMap<usize, f64>)> {
    if clusters.len() != fractions.len() {
        return Err(Error::Contract(format!(
            "{} clusters but {} time fractions",
            clusters.len(),
            fractions.len()
        )));
    }
    check_fractions(&fractions)?;
    let mut rates = BTreeMap::new();
    for (cluster, &f) in clusters.iter().zip(&fractions) {
        if cluster.is_empty() {
            continue;
        }
        let report = noma_rates(gains, cluster, noise, &[], &[], SicMode::Idealized)?;
        for (&u, &r) in report.user_ids.iter().zip(&report.rates) {
            if rates.insert(u, f * r).is_some() {
                return Err(Error::Contract(format!("user {u} appears in two clusters")));
            }
        }
    }
    Ok((ClusterSchedule { clusters, fractions }, rates))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_user_group() -> NomaGroup {
        // user 0 = cell centre (gain 10), user 1 = cell edge (gain 1), edge decoded first
        NomaGroup::new(vec![1, 0], vec![0.8, 0.2], 1.0).unwrap()
    }

    #[test]
    fn order_examples() {
        assert_eq!(decoding_order(&[3.0, 1.0, 2.0]).unwrap(), vec![1, 2, 0]);
        assert_eq!(decoding_order(&[5.0, 5.0]).unwrap(), vec![0, 1]);
        assert_eq!(decoding_order(&[0.4]).unwrap(), vec![0]);
        assert!(matches!(decoding_order(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn worked_two_user_rates() {
        let r = noma_rates(&[10.0, 1.0], &two_user_group(), 1.0, &[], &[], SicMode::Idealized).unwrap();
        let edge = r.rate_of(1).unwrap();
        let centre = r.rate_of(0).unwrap();
        assert!((edge - (1.0f64 + 0.8 / 1.2).log2()).abs() < 1e-12);
        assert!((edge - 0.737).abs() < 1e-3);
        assert!((centre - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn single_user_snr_one() {
        let g = NomaGroup::new(vec![0], vec![1.0], 1.0).unwrap();
        let r = noma_rates(&[1.0], &g, 1.0, &[], &[], SicMode::Idealized).unwrap();
        assert_eq!(r.rates, vec![1.0]);
    }

    #[test]
    fn zero_power_means_zero_rate_and_outage() {
        let mut g = two_user_group();
        g.total_power = 0.0;
        let r = noma_rates(&[10.0, 1.0], &g, 1.0, &[], &[0.1, 0.1], SicMode::Strict).unwrap();
        assert_eq!(r.rates, vec![0.0, 0.0]);
        assert_eq!(r.outage, vec![true, true]);
    }

    #[test]
    fn coefficient_count_mismatch_is_contract_error() {
        let g = NomaGroup {
            user_ids: vec![0, 1],
            coeffs: vec![1.0],
            total_power: 1.0,
        };
        assert!(matches!(
            noma_rates(&[1.0, 2.0], &g, 1.0, &[], &[], SicMode::Idealized),
            Err(Error::Contract(_))
        ));
        assert!(NomaGroup::new(vec![0, 1], vec![0.7, 0.7], 1.0).is_err());
    }

    #[test]
    fn oma_examples() {
        let r = oma_rates(&[10.0, 1.0], 1.0, 1.0, &[0.5, 0.5], &[]).unwrap();
        assert!((r.rates[0] - 0.5 * 11f64.log2()).abs() < 1e-12);
        assert!((r.rates[0] - 1.730).abs() < 1e-3);
        assert!((r.rates[1] - 0.5).abs() < 1e-12);
        let r = oma_rates(&[10.0, 1.0], 1.0, 1.0, &[1.0, 0.0], &[]).unwrap();
        assert_eq!(r.rates[1], 0.0);
        assert!(matches!(
            oma_rates(&[10.0, 1.0], 1.0, 1.0, &[0.5, 0.6], &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_user_noma_equals_oma() {
        for g in [0.01, 0.7, 3.0, 250.0] {
            let group = NomaGroup::new(vec![0], vec![1.0], 2.0).unwrap();
            let a = noma_rates(&[g], &group, 0.5, &[], &[], SicMode::Idealized).unwrap();
            let b = oma_rates(&[g], 2.0, 0.5, &[1.0], &[]).unwrap();
            assert_eq!(a.rates, b.rates);
        }
    }

    #[test]
    fn max_min_closed_form() {
        let s = max_min_power_allocation(&[10.0, 1.0], 1.0, 1.0).unwrap();
        let a_centre = (-11.0 + 161f64.sqrt()) / 20.0;
        let pos = s.group.user_ids.iter().position(|&u| u == 0).unwrap();
        assert!((s.group.coeffs[pos] - a_centre).abs() < 1e-9);
        assert!((s.common_rate - (1.0 + 10.0 * a_centre).log2()).abs() < 1e-9);
        assert!((s.common_rate - 0.8832).abs() < 1e-3);
        assert_eq!(s.group.user_ids, vec![1, 0]);
    }

    #[test]
    fn max_min_single_user_takes_everything() {
        let s = max_min_power_allocation(&[0.3], 4.0, 1.0).unwrap();
        assert_eq!(s.group.coeffs, vec![1.0]);
    }

    #[test]
    fn max_min_equal_gains_favours_first_decoded() {
        let s = max_min_power_allocation(&[2.0, 2.0], 1.0, 1.0).unwrap();
        assert_eq!(s.group.user_ids, vec![0, 1]);
        assert!(s.group.coeffs[0] > s.group.coeffs[1]);
        let sum: f64 = s.group.coeffs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_min_equalizes_rates() {
        let gains = [0.4, 7.0, 2.2, 30.0];
        let s = max_min_power_allocation(&gains, 1.0, 1.0).unwrap();
        let r = noma_rates(&gains, &s.group, 1.0, &[], &[], SicMode::Idealized).unwrap();
        for rate in &r.rates {
            assert!((rate - s.common_rate).abs() < 1e-6);
        }
    }

    #[test]
    fn sic_outage_examples() {
        let r = noma_rates(&[10.0, 1.0], &two_user_group(), 1.0, &[], &[], SicMode::Idealized).unwrap();
        // report order is [edge, centre]
        assert_eq!(sic_outage(&r, &[0.5, 1.0], SicMode::Idealized).unwrap(), vec![false, false]);
        assert_eq!(sic_outage(&r, &[0.5, 2.0], SicMode::Idealized).unwrap(), vec![false, true]);
        assert_eq!(sic_outage(&r, &[0.0, 0.0], SicMode::Strict).unwrap(), vec![false, false]);
    }

    #[test]
    fn strict_mode_propagates_earlier_stage_failure() {
        // centre receiver decodes the edge message at SINR 0.8*10/(0.2*10+1) = 2.667
        let r = noma_rates(&[10.0, 1.0], &two_user_group(), 1.0, &[], &[], SicMode::Idealized).unwrap();
        let th = [2.0, 0.5];
        assert_eq!(sic_outage(&r, &th, SicMode::Idealized).unwrap(), vec![true, false]);
        assert_eq!(sic_outage(&r, &th, SicMode::Strict).unwrap(), vec![true, true]);
        let th = [(1.0f64 + 8.0 / 3.0).log2() + 1e-9, 0.0];
        assert!(sic_outage(&r, &th, SicMode::Strict).unwrap()[1]);
    }

    #[test]
    fn subtraction_raises_stage_sinr() {
        let g = NomaGroup::new(vec![2, 0, 1], vec![0.6, 0.3, 0.1], 1.0).unwrap();
        let r = noma_rates(&[5.0, 9.0, 1.0], &g, 1.0, &[], &[], SicMode::Idealized).unwrap();
        // at the last receiver, stage 1 after cancelling stage 0 vs. without cancelling
        let gain = 9.0;
        let without = 0.3 * gain / (gain * (0.6 + 0.1) + 1.0);
        assert!(r.stage_sinr[2][1] > without);
    }

    #[test]
    fn cluster_examples() {
        let (_, rates) =
            cluster_schedule(vec![two_user_group()], vec![1.0], &[10.0, 1.0], 1.0).unwrap();
        let plain = noma_rates(&[10.0, 1.0], &two_user_group(), 1.0, &[], &[], SicMode::Idealized).unwrap();
        assert_eq!(rates[&0], plain.rate_of(0).unwrap());
        assert_eq!(rates[&1], plain.rate_of(1).unwrap());

        let solo = |u| NomaGroup::new(vec![u], vec![1.0], 1.0).unwrap();
        let (_, rates) = cluster_schedule(vec![solo(0), solo(1)], vec![0.5, 0.5], &[3.0, 3.0], 1.0).unwrap();
        assert_eq!(rates[&0], 0.5 * 2.0);
        assert_eq!(rates[&1], 0.5 * 2.0);

        let a = two_user_group();
        let b = NomaGroup::new(vec![3, 2], vec![0.8, 0.2], 1.0).unwrap();
        let gains = [10.0, 1.0, 10.0, 1.0];
        let (_, rates) = cluster_schedule(vec![a, b], vec![0.5, 0.5], &gains, 1.0).unwrap();
        assert!((rates[&1] - 0.5 * (1.0f64 + 0.8 / 1.2).log2()).abs() < 1e-12);
        assert!((rates[&2] - 0.5 * 3f64.log2()).abs() < 1e-12);

        let dup = cluster_schedule(vec![solo(0), solo(0)], vec![0.5, 0.5], &[1.0], 1.0);
        assert!(matches!(dup, Err(Error::Contract(_))));
    }
}
