//! Theoretical regularization schedules and regime classification for the
//! pretraining error. Constants are dropped; only orders in `n` and `N` are
//! reported. Counts are taken as reals so that asymptotic grids can be probed
//! without overflow, and every power is evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default exponent of the log factor in the large-`N` schedules.
pub const DEFAULT_OMEGA: f64 = 2.5;

/// Source smoothness `r`, eigenvalue decay `p` and embedding index `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityParams {
    pub r: f64,
    pub p: f64,
    pub alpha: f64,
}

impl RegularityParams {
    /// Checks `0 ≤ r ≤ 1` and `0 ≤ p ≤ alpha ≤ 1`.
    pub fn new(r: f64, p: f64, alpha: f64) -> Result<Self> {
        let v = Self { r, p, alpha };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.r) {
            return Err(Error::InvalidParameter(format!("r must lie in [0, 1], got {}", self.r)));
        }
        if !unit(self.p) || !unit(self.alpha) || self.p > self.alpha {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= p <= alpha <= 1, got p = {}, alpha = {}",
                self.p, self.alpha
            )));
        }
        Ok(())
    }

    /// `2r + 1 + p`.
    fn width(&self) -> f64 {
        2.0 * self.r + 1.0 + self.p
    }

    fn finite_dimensional(&self) -> bool {
        self.p == 0.0 && self.alpha == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Few tasks: λ balances bias and variance over all `nN` samples.
    A,
    /// Many tasks, `r ≤ 1/2`.
    B1,
    /// Many tasks, `r > 1/2`.
    B2,
    /// `N ≳ eⁿ`.
    Exp,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::A => "A",
            Regime::B1 => "B1",
            Regime::B2 => "B2",
            Regime::Exp => "EXP",
        }
    }
}

/// Sample count a rate or schedule is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateBase {
    /// `nN`
    TotalSamples,
    /// `n`
    PerTask,
}

impl RateBase {
    pub fn label(self) -> &'static str {
        match self {
            RateBase::TotalSamples => "nN",
            RateBase::PerTask => "n",
        }
    }
}

/// `base^{-exponent}` with logs dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub base: RateBase,
    pub exponent: f64,
}

impl PowerLaw {
    fn at(&self, ln_n: f64, ln_total: f64) -> f64 {
        let ln_base = match self.base {
            RateBase::TotalSamples => ln_total,
            RateBase::PerTask => ln_n,
        };
        (-self.exponent * ln_base).exp()
    }
}

/// Pretraining error for finite-dimensional kernels: `√(k/(nN))·log(nN)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDimRate {
    /// Exponent of `nN`, always `1/2`.
    pub exponent: f64,
    /// `log(nN)/√(nN)`, to be multiplied by `√k`.
    pub rate_over_sqrt_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    /// λ under the regime's schedule, log factors included.
    pub lambda: f64,
    /// λ with log factors dropped.
    pub lambda_order: PowerLaw,
    /// Pretraining error decays as `base^{-exponent}` up to logs.
    pub rate: PowerLaw,
    /// Pretraining error bound with log factors included.
    pub rate_value: f64,
    /// Largest `N` still in regime A at this `n` (`+∞` when unbounded).
    pub boundary_n_tasks: f64,
    pub omega: f64,
    pub finite_dim: Option<FiniteDimRate>,
}

fn check_counts(n: f64, n_tasks: f64) -> Result<()> {
    if !(n >= 2.0) || !(n_tasks >= 2.0) || !n.is_finite() || !n_tasks.is_finite() {
        return Err(Error::InvalidParameter(format!("need n, N >= 2, got n = {n}, N = {n_tasks}")));
    }
    Ok(())
}

/// `ln` of the largest `N` in regime A at per-task size `n`.
fn ln_boundary(params: &RegularityParams, ln_n: f64) -> f64 {
    let w = params.width();
    if params.r <= 0.5 {
        if params.alpha == 0.0 {
            f64::INFINITY
        } else {
            (w / params.alpha - 1.0) * ln_n
        }
    } else {
        (w / (params.p + 1.0) - 1.0) * ln_n
    }
}

/// [`classify_with_omega`] with `ω = 2.5`.
pub fn classify_regime(params: &RegularityParams, n: f64, n_tasks: f64) -> Result<RegimeReport> {
    classify_with_omega(params, n, n_tasks, DEFAULT_OMEGA)
}

/// Regime, λ schedule and pretraining-error rate at `(n, N)`.
pub fn classify_with_omega(params: &RegularityParams, n: f64, n_tasks: f64, omega: f64) -> Result<RegimeReport> {
    params.validate()?;
    check_counts(n, n_tasks)?;
    if !(omega > 2.0) {
        return Err(Error::InvalidParameter(format!("omega must exceed 2, got {omega}")));
    }
    let RegularityParams { r, p, alpha } = *params;
    let ln_n = n.ln();
    let ln_total = ln_n + n_tasks.ln();
    let ln_log = ln_total.ln();
    let ln_boundary = ln_boundary(params, ln_n);
    let w = params.width();

    let regime = if n_tasks.ln() >= n {
        Regime::Exp
    } else if n_tasks.ln() <= ln_boundary {
        Regime::A
    } else if r <= 0.5 {
        Regime::B1
    } else {
        Regime::B2
    };
    let (ln_lambda, lambda_order, rate, ln_rate) = match regime {
        Regime::A => {
            // (log²(nN)/(nN))^{1/w}, rate (log²(nN)/(nN))^{r/w}.
            let ln_base = 2.0 * ln_log - ln_total;
            (
                ln_base / w,
                PowerLaw { base: RateBase::TotalSamples, exponent: 1.0 / w },
                PowerLaw { base: RateBase::TotalSamples, exponent: r / w },
                ln_base * r / w,
            )
        }
        Regime::B1 | Regime::B2 => {
            let denom = if regime == Regime::B1 { alpha } else { p + 1.0 };
            let ln_base = omega * ln_log - ln_n;
            (
                ln_base / denom,
                PowerLaw { base: RateBase::PerTask, exponent: 1.0 / denom },
                PowerLaw { base: RateBase::PerTask, exponent: r / denom },
                ln_base * r / denom,
            )
        }
        Regime::Exp => (
            -0.5 * ln_n,
            PowerLaw { base: RateBase::PerTask, exponent: 0.5 },
            PowerLaw { base: RateBase::PerTask, exponent: r / 2.0 },
            -0.5 * r * ln_n,
        ),
    };
    let finite_dim = params.finite_dimensional().then(|| FiniteDimRate {
        exponent: 0.5,
        rate_over_sqrt_k: (ln_log - 0.5 * ln_total).exp(),
    });
    Ok(RegimeReport {
        regime,
        lambda: ln_lambda.exp(),
        lambda_order,
        rate,
        rate_value: ln_rate.exp(),
        boundary_n_tasks: ln_boundary.exp(),
        omega,
        finite_dim,
    })
}

/// `n^{-1/(2·min(r, 1/2) + 1 + p)}`.
pub fn krr_optimal_lambda(params: &RegularityParams, n: f64) -> Result<f64> {
    params.validate()?;
    if !(n >= 2.0) {
        return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
    }
    Ok((-n.ln() / (2.0 * params.r.min(0.5) + 1.0 + params.p)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainCase {
    /// Regime A with `α/2 ≤ r ≤ 1/2`.
    ALow,
    /// Regime A with `(p+1)/2 ≤ r ≤ 1`.
    AHigh,
    B1,
    B2,
}

impl GainCase {
    pub fn label(self) -> &'static str {
        match self {
            GainCase::ALow => "A (alpha/2 <= r <= 1/2)",
            GainCase::AHigh => "A ((p+1)/2 <= r <= 1)",
            GainCase::B1 => "B1",
            GainCase::B2 => "B2",
        }
    }
}

/// One row of the parametric-rate conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub case: GainCase,
    pub r_lower: f64,
    pub r_upper: f64,
    /// Admissible task counts `[lower, upper]` at this `n`; `upper` is `eⁿ`
    /// for the many-task rows.
    pub n_tasks_lower: f64,
    pub n_tasks_upper: f64,
    pub lambda_order: PowerLaw,
    /// `r` lies in the row's range and the task-count interval is non-empty.
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub greatest_gain: bool,
    pub rows: Vec<GainRow>,
}

/// Evaluates every row of the parametric-rate conditions at `n`.
///
/// λ orders for the many-task rows follow the log-free corollary schedules
/// `n^{-1/α}` and `n^{-1/(p+1)}`.
pub fn gain_conditions(params: &RegularityParams, n: f64) -> Result<GainReport> {
    params.validate()?;
    if !(n >= 2.0) {
        return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
    }
    let RegularityParams { r, p, alpha } = *params;
    let w = params.width();
    let ln_n = n.ln();
    let pow = |e: f64| (e * ln_n).exp();
    let lower_a = if r > 0.0 { pow(w / (2.0 * r) - 1.0) } else { f64::INFINITY };
    let alpha_edge = if alpha > 0.0 { pow(w / alpha - 1.0) } else { f64::INFINITY };
    let p_edge = pow(w / (p + 1.0) - 1.0);
    let e_n = n.exp();
    let low_band = r > 0.0 && alpha / 2.0 <= r && r <= 0.5;
    let high_band = r > 0.0 && (p + 1.0) / 2.0 <= r && r <= 1.0;
    let a_order = PowerLaw { base: RateBase::TotalSamples, exponent: 1.0 / w };
    let row = |case, r_lower, r_upper, lo: f64, hi: f64, lambda_order, band: bool| GainRow {
        case,
        r_lower,
        r_upper,
        n_tasks_lower: lo,
        n_tasks_upper: hi,
        lambda_order,
        satisfied: band && lo <= hi,
    };
    let rows = vec![
        row(GainCase::ALow, alpha / 2.0, 0.5, lower_a, alpha_edge, a_order, low_band),
        row(GainCase::AHigh, (p + 1.0) / 2.0, 1.0, lower_a, p_edge, a_order, high_band),
        row(
            GainCase::B1,
            alpha / 2.0,
            0.5,
            alpha_edge,
            e_n,
            PowerLaw {
                base: RateBase::PerTask,
                exponent: if alpha > 0.0 { 1.0 / alpha } else { f64::INFINITY },
            },
            low_band,
        ),
        row(
            GainCase::B2,
            (p + 1.0) / 2.0,
            1.0,
            p_edge,
            e_n,
            PowerLaw { base: RateBase::PerTask, exponent: 1.0 / (p + 1.0) },
            high_band,
        ),
    ];
    Ok(GainReport { greatest_gain: rows.iter().any(|r| r.satisfied), rows })
}

impl RegimeReport {
    /// Log-free λ evaluated at `(n, N)`.
    pub fn lambda_order_at(&self, n: f64, n_tasks: f64) -> f64 {
        let ln_n = n.ln();
        self.lambda_order.at(ln_n, ln_n + n_tasks.ln())
    }
}
