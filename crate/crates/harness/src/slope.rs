//! Log-log slopes of seed medians with a seed bootstrap.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::report::{median, Record};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_SEED: u64 = 0x5EED;
const MIN_POINTS: usize = 3;
const MIN_SEEDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum XAxis {
    /// `N`
    Tasks,
    /// `n`
    PerTask,
    /// `nN`
    TotalSamples,
    /// `n_T`
    Target,
}

impl XAxis {
    fn value(self, r: &Record) -> f64 {
        match self {
            XAxis::Tasks => r.n_tasks as f64,
            XAxis::PerTask => r.n as f64,
            XAxis::TotalSamples => (r.n * r.n_tasks) as f64,
            XAxis::Target => r.n_target as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    SinTheta,
    ChatCn,
    ExcessRisk,
    BaselineKrrRisk,
    OracleProjRisk,
}

impl Column {
    pub fn get(self, r: &Record) -> Option<f64> {
        match self {
            Column::SinTheta => r.sin_theta_hs,
            Column::ChatCn => r.chat_cn_hs,
            Column::ExcessRisk => r.excess_risk,
            Column::BaselineKrrRisk => r.baseline_krr_risk,
            Column::OracleProjRisk => r.oracle_proj_risk,
        }
    }
}

/// Least-squares slope with a 95% percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Slope of `log(median y)` against `log x`, where the median runs over
/// seeds at each `x`. The interval resamples seeds with replacement, keeping
/// each seed's values at every `x` together.
///
/// Needs at least 3 distinct `x` and 5 seeds at each, and exactly one record
/// per `(x, seed)`.
pub fn fit_slope_records(records: &[&Record], x_axis: XAxis, y: Column) -> Result<SlopeFit> {
    // table[x][seed] = y
    let mut table: BTreeMap<u64, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records {
        let Some(v) = y.get(r) else { continue };
        let x = x_axis.value(r);
        if table.entry(x.to_bits()).or_default().insert(r.seed, v).is_some() {
            return Err(HarnessError::InsufficientData(format!(
                "several records share x = {x} and seed {}; fix the other axes first",
                r.seed
            )));
        }
    }
    if table.len() < MIN_POINTS {
        return Err(HarnessError::InsufficientData(format!(
            "need {MIN_POINTS} distinct x values, got {}",
            table.len()
        )));
    }
    if let Some((x, col)) = table.iter().find(|(_, col)| col.len() < MIN_SEEDS) {
        return Err(HarnessError::InsufficientData(format!(
            "x = {} has {} seeds, need {MIN_SEEDS}",
            f64::from_bits(*x),
            col.len()
        )));
    }
    let log_x: Vec<f64> = table.keys().map(|&x| f64::from_bits(x).ln()).collect();
    let fit = |pick: &dyn Fn(&BTreeMap<u64, f64>) -> Vec<f64>| -> Option<f64> {
        let mut log_y = Vec::with_capacity(table.len());
        for col in table.values() {
            let m = median(&mut pick(col))?;
            if !(m > 0.0) {
                return None;
            }
            log_y.push(m.ln());
        }
        Some(ls_slope(&log_x, &log_y))
    };
    let slope = fit(&|col| col.values().copied().collect())
        .ok_or_else(|| HarnessError::InsufficientData("medians must be positive for a log-log fit".into()))?;

    let seeds: Vec<u64> = table.values().flat_map(|c| c.keys().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut draws = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let sample: Vec<u64> = (0..seeds.len()).map(|_| seeds[rng.random_range(0..seeds.len())]).collect();
        if let Some(s) = fit(&|col| sample.iter().filter_map(|s| col.get(s).copied()).collect()) {
            draws.push(s);
        }
    }
    if draws.is_empty() {
        return Err(HarnessError::InsufficientData("no usable bootstrap resample".into()));
    }
    draws.sort_by(f64::total_cmp);
    Ok(SlopeFit {
        slope,
        ci_low: quantile(&draws, 0.025),
        ci_high: quantile(&draws, 0.975),
        points: table.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(xs: &[usize], seeds: u64, y: impl Fn(f64, u64) -> f64) -> Vec<Record> {
        let mut out = Vec::new();
        for &x in xs {
            for seed in 0..seeds {
                let mut r = Record::new("h", seed, 10, 20, x, 1);
                r.excess_risk = Some(y(x as f64, seed));
                out.push(r);
            }
        }
        out
    }

    fn fit(rs: &[Record]) -> Result<SlopeFit> {
        let refs: Vec<&Record> = rs.iter().collect();
        fit_slope_records(&refs, XAxis::Target, Column::ExcessRisk)
    }

    #[test]
    fn exact_power_law() {
        let rs = records(&[10, 20, 40, 80], 5, |x, _| 1.0 / x);
        let f = fit(&rs).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!(f.ci_high - f.ci_low < 0.02);
        assert!(f.ci_low <= f.slope && f.slope <= f.ci_high);
    }

    #[test]
    fn constant_has_zero_slope() {
        let rs = records(&[10, 20, 40], 6, |_, s| 1.0 + 0.1 * (s as f64 - 2.5));
        let f = fit(&rs).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(f.ci_low <= 0.0 && 0.0 <= f.ci_high);
    }

    #[test]
    fn insufficient_data() {
        assert!(fit(&records(&[10, 20], 5, |x, _| x)).is_err());
        assert!(fit(&records(&[10, 20, 40], 4, |x, _| x)).is_err());
        let mut rs = records(&[10, 20, 40], 5, |x, _| x);
        rs.push(rs[0].clone());
        assert!(fit(&rs).is_err());
        assert!(fit(&records(&[10, 20, 40], 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn slope_uses_medians() {
        // One wild seed per x does not move the median.
        let rs = records(&[10, 100, 1000], 5, |x, s| if s == 0 { 1e6 } else { x.powf(-0.5) * (1.0 + 0.01 * s as f64) });
        let f = fit(&rs).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn recovers_noiseless_exponents(e in -2.0f64..2.0, c in 0.1f64..10.0) {
            let rs = records(&[5, 10, 20, 40, 80], 5, |x, _| c * x.powf(e));
            let f = fit(&rs).unwrap();
            prop_assert!((f.slope - e).abs() < 1e-9);
            prop_assert!(f.ci_low <= f.slope + 1e-9 && f.slope - 1e-9 <= f.ci_high);
        }
    }
}
