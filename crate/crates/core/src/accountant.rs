//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `nu` (sensitivity 1), one
//! step has RDP `ln(A_alpha) / (alpha - 1)` with
//!
//! ```text
//! A_alpha = E_{z ~ N(0, nu^2)} [ ((1 - q) + q exp((2z - 1) / (2 nu^2)))^alpha ]
//! ```
//!
//! Integer orders use the exact binomial expansion
//! `A_alpha = sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 nu^2))`.
//! Fractional orders use the two-sided erfc series of the same quantity.
//! Both are summed in log space.
//!
//! Curves convert to `(eps, delta)` through
//! `eps = min_alpha [ rdp(alpha) + ln(1/delta) / (alpha - 1) ]`.
//!
//! Grid searches charge every configuration the same number of steps at the
//! same multiplier; repeated seeds of one configuration are not charged.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest multiplier the calibration will consider.
pub const MAX_NU: f64 = 1e6;

/// Relative tolerance of the calibration bisection.
pub const CALIBRATION_TOL: f64 = 1e-4;

/// `{1.25, 1.5, 1.75, 2, 3, ..., 64, 128, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0]);
    orders
}

/// RDP values over a grid of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    eps_rdp: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, eps_rdp: Vec<f64>) -> Result<Self> {
        if orders.len() != eps_rdp.len() {
            return Err(Error::Dimension {
                expected: orders.len(),
                actual: eps_rdp.len(),
            });
        }
        check_orders(&orders)?;
        if eps_rdp.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::param("RDP values must be finite and >= 0"));
        }
        Ok(RdpCurve { orders, eps_rdp })
    }

    pub fn zero(orders: Vec<f64>) -> Result<Self> {
        let n = orders.len();
        RdpCurve::new(orders, vec![0.0; n])
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn eps_rdp(&self) -> &[f64] {
        &self.eps_rdp
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// `repetitions`-fold composition.
    pub fn compose(&self, repetitions: u64) -> RdpCurve {
        let r = repetitions as f64;
        RdpCurve {
            orders: self.orders.clone(),
            eps_rdp: self.eps_rdp.iter().map(|e| e * r).collect(),
        }
    }

    /// Composition with another mechanism accounted on the same orders.
    pub fn combine(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::param("cannot combine curves on different order grids"));
        }
        Ok(RdpCurve {
            orders: self.orders.clone(),
            eps_rdp: self
                .eps_rdp
                .iter()
                .zip(&other.eps_rdp)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if let Some(&a) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
        return Err(Error::param(format!("RDP order must be > 1, got {a}")));
    }
    if orders.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("RDP orders must be strictly increasing"));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(a) - exp(b))` for `a >= b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        // asymptotic expansion; erfc underflows past ~26.5
        let x2 = x * x;
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln()
            + (-0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)).ln_1p()
    }
}

fn log_a_integer(q: f64, nu: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let s2 = nu * nu;
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + kf * log_q + (alpha - k) as f64 * log_1mq + (kf * kf - kf) / (2.0 * s2);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_fractional(q: f64, nu: f64, alpha: f64) -> f64 {
    let s2 = nu * nu;
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut coef = 1.0f64;
    let mut i = 0u64;
    loop {
        if i > 0 {
            coef *= (alpha - (i - 1) as f64) / i as f64;
        }
        let fi = i as f64;
        let j = alpha - fi;
        let log_coef = coef.abs().ln();
        let log_t0 = log_coef + fi * log_q + j * log_1mq;
        let log_t1 = log_coef + j * log_q + fi * log_1mq;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * nu));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * nu));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        if fi > alpha && log_s0.max(log_s1) < -40.0 {
            break;
        }
        if i > 100_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// RDP of one Poisson-subsampled Gaussian step at order `alpha`.
pub fn rdp_sampled_gaussian(rate: f64, nu: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::param(format!("RDP order must be > 1, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("sampling rate must be in [0, 1], got {rate}")));
    }
    if !(nu > 0.0) {
        return Err(Error::param(format!("noise multiplier must be > 0, got {nu}")));
    }
    if rate == 0.0 {
        return Ok(0.0);
    }
    if rate == 1.0 {
        return Ok(alpha / (2.0 * nu * nu));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_integer(rate, nu, alpha as u64)
    } else {
        log_a_fractional(rate, nu, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// One-step RDP curve over `orders`.
pub fn rdp_curve(rate: f64, nu: f64, orders: &[f64]) -> Result<RdpCurve> {
    check_orders(orders)?;
    let eps = orders
        .iter()
        .map(|&a| rdp_sampled_gaussian(rate, nu, a))
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::new(orders.to_vec(), eps)
}

/// Classic RDP to `(eps, delta)` conversion. Returns `(eps, minimizing order)`.
pub fn to_eps_delta(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(format!("delta must be in (0, 1), got {delta}")));
    }
    if curve.is_empty() {
        return Err(Error::param("cannot convert an empty RDP curve"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&a, &e) in curve.orders.iter().zip(&curve.eps_rdp) {
        let eps = e + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// Signature of an RDP to `(eps, delta)` conversion.
pub type Conversion = fn(&RdpCurve, f64) -> Result<(f64, f64)>;

/// Privacy budget of a whole search: `num_runs` runs of `steps_per_run` steps each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub eps_total: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub steps_per_run: u64,
    pub num_runs: u64,
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_total > 0.0) || !self.eps_total.is_finite() {
            return Err(Error::config("eps", "must be > 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must be in (0, 1)"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config("sampling_rate", "must be in (0, 1]"));
        }
        if self.num_runs == 0 {
            return Err(Error::config("num_runs", "must be >= 1"));
        }
        Ok(())
    }

    /// True when delta is at least 1/|D|, which weakens the guarantee.
    pub fn delta_too_large(&self, dataset_len: usize) -> bool {
        self.delta >= 1.0 / dataset_len as f64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_run * self.num_runs
    }
}

/// Total epsilon spent by `budget`'s steps at multiplier `nu`, with the minimizing order.
pub fn epsilon_spent(nu: f64, budget: &BudgetSpec, orders: &[f64], conversion: Conversion) -> Result<(f64, f64)> {
    if budget.total_steps() == 0 {
        return Ok((0.0, orders[orders.len() - 1]));
    }
    let curve = rdp_curve(budget.sampling_rate, nu, orders)?.compose(budget.total_steps());
    conversion(&curve, budget.delta)
}

/// Smallest multiplier meeting the budget, using the default orders and conversion.
pub fn calibrate_nu(budget: &BudgetSpec) -> Result<f64> {
    calibrate_nu_with(budget, &default_orders(), to_eps_delta)
}

pub fn calibrate_nu_with(budget: &BudgetSpec, orders: &[f64], conversion: Conversion) -> Result<f64> {
    budget.validate()?;
    if budget.total_steps() == 0 {
        return Err(Error::param("nothing to calibrate: zero steps"));
    }
    let eps = |nu: f64| -> Result<f64> { Ok(epsilon_spent(nu, budget, orders, conversion)?.0) };
    if eps(MAX_NU)? > budget.eps_total {
        return Err(Error::Calibration(format!(
            "eps = {} unreachable with nu <= {MAX_NU} (delta = {}, {} steps)",
            budget.eps_total,
            budget.delta,
            budget.total_steps()
        )));
    }
    // bracket [lo, hi] with eps(lo) > target >= eps(hi)
    let (mut lo, mut hi) = (1.0, 1.0);
    if eps(1.0)? <= budget.eps_total {
        while eps(lo)? <= budget.eps_total {
            hi = lo;
            lo /= 2.0;
            if lo < 1e-6 {
                return Ok(hi);
            }
        }
    } else {
        while eps(hi)? > budget.eps_total {
            lo = hi;
            hi = (hi * 2.0).min(MAX_NU);
        }
    }
    while hi / lo - 1.0 > CALIBRATION_TOL {
        let mid = (lo * hi).sqrt();
        if eps(mid)? <= budget.eps_total {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Recomputes the spent epsilon at `nu`; `ok` when within the budget.
pub fn verify_budget(nu: f64, budget: &BudgetSpec) -> (f64, bool) {
    match epsilon_spent(nu, budget, &default_orders(), to_eps_delta) {
        Ok((eps, _)) => (eps, eps <= budget.eps_total),
        Err(_) => (f64::INFINITY, false),
    }
}

/// Accounting summary written alongside results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    /// Epsilon spent by the whole search (all charged runs).
    pub eps_total: f64,
    pub delta: f64,
    pub nu: f64,
    pub nu_q: Option<f64>,
    pub nu_g: f64,
    /// Epsilon spent by a single run.
    pub eps_per_run: f64,
    /// Order minimizing the total-epsilon conversion.
    pub best_order: f64,
}

impl AccountingReport {
    pub fn new(budget: &BudgetSpec, nu: f64, nu_q: Option<f64>, nu_g: f64) -> Result<Self> {
        let orders = default_orders();
        let (eps_total, best_order) = epsilon_spent(nu, budget, &orders, to_eps_delta)?;
        let single = BudgetSpec {
            num_runs: 1,
            ..*budget
        };
        let (eps_per_run, _) = epsilon_spent(nu, &single, &orders, to_eps_delta)?;
        Ok(AccountingReport {
            eps_total,
            delta: budget.delta,
            nu,
            nu_q,
            nu_g,
            eps_per_run,
            best_order,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsampled_and_empty_rates() {
        assert_eq!(rdp_sampled_gaussian(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_sampled_gaussian(0.0, 1.0, 7.5).unwrap(), 0.0);
        assert!(rdp_sampled_gaussian(0.1, 1.0, 1.0).is_err());
        assert!(rdp_sampled_gaussian(0.1, 1.0, 0.5).is_err());
    }

    #[test]
    fn rdp_monotone_in_rate_and_order() {
        for alpha in [1.5, 2.0, 8.0, 32.0] {
            let mut last = 0.0;
            for rate in [1e-4, 1e-3, 1e-2, 0.1, 0.5, 0.9, 1.0] {
                let e = rdp_sampled_gaussian(rate, 1.3, alpha).unwrap();
                assert!(e >= last, "alpha={alpha} rate={rate}");
                last = e;
            }
        }
        let c = rdp_curve(0.05, 1.0, &default_orders()).unwrap();
        assert!(c.eps_rdp().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn compose_examples() {
        let c = rdp_curve(0.02, 1.0, &default_orders()).unwrap();
        assert!(c.compose(0).eps_rdp().iter().all(|&e| e == 0.0));
        assert_eq!(c.compose(2), c.combine(&c).unwrap());
        let nested = c.compose(3).compose(5);
        for (a, b) in nested.eps_rdp().iter().zip(c.compose(15).eps_rdp()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn conversion_examples() {
        let orders = default_orders();
        let zero = RdpCurve::zero(orders.clone()).unwrap();
        let (eps, order) = to_eps_delta(&zero, 1e-5).unwrap();
        assert_eq!(order, 256.0);
        assert!((eps - (1e5f64).ln() / 255.0).abs() < 1e-15);

        let single = RdpCurve::new(vec![2.0], vec![1.0]).unwrap();
        let (eps, order) = to_eps_delta(&single, 1e-5).unwrap();
        assert_eq!(order, 2.0);
        assert!((eps - 12.512_925_464_970_229).abs() < 1e-12);

        let c = rdp_curve(0.01, 1.0, &orders).unwrap().compose(500);
        let mut last = f64::INFINITY;
        for delta in [1e-9, 1e-7, 1e-5, 1e-3, 0.1, 0.5] {
            let (e, _) = to_eps_delta(&c, delta).unwrap();
            assert!(e <= last);
            last = e;
        }
        assert!(to_eps_delta(&c, 1.0).is_err());
        assert!(RdpCurve::new(vec![], vec![]).map(|c| to_eps_delta(&c, 0.1)).unwrap().is_err());
    }

    #[test]
    fn curve_validation() {
        assert!(RdpCurve::new(vec![2.0, 2.0], vec![0.0, 0.0]).is_err());
        assert!(RdpCurve::new(vec![1.0], vec![0.0]).is_err());
        assert!(RdpCurve::new(vec![2.0], vec![-1.0]).is_err());
    }

    fn budget(eps: f64, runs: u64) -> BudgetSpec {
        BudgetSpec {
            eps_total: eps,
            delta: 1e-5,
            sampling_rate: 0.01,
            steps_per_run: 500,
            num_runs: runs,
        }
    }

    #[test]
    fn calibration_monotonicity() {
        let one = calibrate_nu(&budget(3.0, 1)).unwrap();
        let four = calibrate_nu(&budget(3.0, 4)).unwrap();
        assert!(four > one);
        let doubled = calibrate_nu(&budget(6.0, 1)).unwrap();
        assert!(doubled <= one);
    }

    #[test]
    fn calibrate_verify_round_trip() {
        for (eps, runs) in [(0.5, 1), (1.0, 7), (3.0, 49), (9.0, 1)] {
            let b = budget(eps, runs);
            let nu = calibrate_nu(&b).unwrap();
            let (spent, ok) = verify_budget(nu, &b);
            assert!(ok, "eps={eps} runs={runs}: spent {spent}");
            assert!(spent > 0.99 * eps, "eps={eps} runs={runs}: spent {spent}");
            let (spent_half, ok_half) = verify_budget(nu / 2.0, &b);
            assert!(!ok_half && spent_half > eps);
            // just below the returned value the budget is exceeded
            assert!(!verify_budget(nu * (1.0 - 2.0 * CALIBRATION_TOL), &b).1);
        }
    }

    #[test]
    fn zero_steps_and_infeasible() {
        let mut b = budget(1.0, 1);
        b.steps_per_run = 0;
        assert_eq!(verify_budget(1.0, &b), (0.0, true));
        assert!(calibrate_nu(&b).is_err());
        // ln(1/delta)/(alpha_max - 1) alone exceeds eps
        let tiny = BudgetSpec {
            eps_total: 1e-3,
            ..budget(1.0, 1)
        };
        assert!(matches!(calibrate_nu(&tiny), Err(Error::Calibration(_))));
    }
}
