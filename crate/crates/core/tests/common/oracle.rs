//! Independent reference computations. Nothing here calls into the
//! accountant: RDP is obtained by integrating the Rényi divergence of the
//! Poisson-subsampled Gaussian directly.

#![allow(dead_code)]

use oso_dpsgd::accountant::BudgetSpec;

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// RDP at order `alpha` of one Poisson-subsampled Gaussian step with
/// sensitivity 1 and noise `nu`:
///
/// `1/(alpha-1) * ln  int N(z; 0, nu^2) * ((1-q) + q exp((2z-1)/(2 nu^2)))^alpha dz`
///
/// evaluated by the trapezoid rule in log space on a grid of spacing
/// `nu/128` covering both mixture components out to 16 standard deviations.
pub fn oracle_rdp(rate: f64, nu: f64, alpha: f64) -> f64 {
    if rate == 0.0 {
        return 0.0;
    }
    let s2 = nu * nu;
    let log_norm = -(nu * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_1mq = if rate < 1.0 { (1.0 - rate).ln() } else { f64::NEG_INFINITY };
    let log_q = rate.ln();
    let log_f = |z: f64| {
        let mix = log_add_exp(log_1mq, log_q + (2.0 * z - 1.0) / (2.0 * s2));
        -z * z / (2.0 * s2) + log_norm + alpha * mix
    };
    let lo = -16.0 * nu - 1.0;
    let hi = alpha + 16.0 * nu + 1.0;
    let h = nu / 128.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let vals: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (v - m).exp();
    }
    let log_a = m + (acc * h).ln();
    log_a / (alpha - 1.0)
}

/// (eps, delta) from RDP by the classic conversion, minimized over `orders`.
pub fn oracle_eps(rate: f64, nu: f64, steps: f64, delta: f64, orders: &[f64]) -> f64 {
    orders
        .iter()
        .map(|&a| steps * oracle_rdp(rate, nu, a) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest noise multiplier meeting the budget, by bisection to 1e-7 relative.
pub fn oracle_calibrate(budget: &BudgetSpec, orders: &[f64]) -> f64 {
    let steps = (budget.steps_per_run * budget.num_runs) as f64;
    let eps = |nu: f64| oracle_eps(budget.sampling_rate, nu, steps, budget.delta, orders);
    let (mut lo, mut hi) = (0.05, 1e3);
    assert!(eps(hi) <= budget.eps_total && eps(lo) > budget.eps_total);
    while hi / lo - 1.0 > 1e-7 {
        let mid = (lo * hi).sqrt();
        if eps(mid) <= budget.eps_total {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
