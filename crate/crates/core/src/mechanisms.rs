//! Per-sample clipping and the clipping-threshold derivative vector.
//! Gaussian sanitization of sums, with the noise split for joint queries.
//!
//! Two Gaussian queries answered in parallel with multipliers `nu_q` and
//! `nu_g` cost the same, in RDP terms, as one query with multiplier `nu`
//! whenever `nu^-2 = nu_q^-2 + nu_g^-2`. [`split_noise`] and
//! [`nu_q_for_overhead`] move along that curve.
//!
//! The q-vector sum is always sanitized with `nu_q` and the gradient sum
//! with `nu_g`. The listing of the reference algorithm writes `nu_g` for
//! the q-vector noise; that is read as a typo, since only the `nu_q`
//! reading matches the split above.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{norm2, sample_gaussian, RngStream, Vector};

/// Slack allowed on declared sensitivities for floating-point rounding.
pub const SENSITIVITY_SLACK: f64 = 1e-9;

/// Default fractional increase of `nu_g` over `nu` when splitting.
pub const DEFAULT_OVERHEAD: f64 = 0.01;

fn check_threshold(c: f64) -> Result<()> {
    if !(c > 0.0) || c.is_nan() {
        return Err(Error::param(format!("clipping threshold must be > 0, got {c}")));
    }
    Ok(())
}

/// `g / max(1, |g| / C)`.
pub fn clip(g: &Vector, c: f64) -> Result<Vector> {
    check_threshold(c)?;
    let n = norm2(g);
    let factor = (n / c).max(1.0);
    if factor == 1.0 {
        return Ok(g.clone());
    }
    Ok(g.scaled(1.0 / factor))
}

/// Derivative of the clipped gradient with respect to `C`, up to the
/// `|g|/C` factor: the unit direction of `g` when `|g| > C`, zero otherwise.
/// The boundary `|g| = C` maps to zero.
pub fn q_vector(g: &Vector, c: f64) -> Result<Vector> {
    check_threshold(c)?;
    let n = norm2(g);
    if n > c {
        Ok(g.scaled(1.0 / n))
    } else {
        Ok(Vector::zeros(g.len()))
    }
}

/// Gaussian mechanism on a sum of bounded vectors.
///
/// Returns `(sum(vectors) + eta) / divisor` with `eta ~ N(0, (sensitivity * multiplier)^2 I)`.
/// Every input norm must be within `sensitivity` (plus [`SENSITIVITY_SLACK`]).
pub fn sanitize_sum(
    vectors: &[Vector],
    dim: usize,
    sensitivity: f64,
    multiplier: f64,
    divisor: f64,
    rng: &mut RngStream,
) -> Result<Vector> {
    if !(divisor > 0.0) || !divisor.is_finite() {
        return Err(Error::param(format!("batch divisor must be > 0, got {divisor}")));
    }
    if !(sensitivity >= 0.0) || !(multiplier >= 0.0) {
        return Err(Error::param("sensitivity and multiplier must be >= 0"));
    }
    let mut sum = Vector::zeros(dim);
    for (i, v) in vectors.iter().enumerate() {
        let n = norm2(v);
        if n > sensitivity + SENSITIVITY_SLACK {
            return Err(Error::Contract(format!(
                "sample {i} has norm {n} above declared sensitivity {sensitivity}"
            )));
        }
        sum.add_assign(v)?;
    }
    let sigma = sensitivity * multiplier;
    if sigma > 0.0 {
        sum.add_assign(&sample_gaussian(dim, sigma, rng)?)?;
    }
    Ok(sum.scaled(1.0 / divisor))
}

/// Gaussian mechanism on a count with unit sensitivity: `(count + N(0, multiplier^2)) / divisor`.
pub fn sanitize_count(count: usize, multiplier: f64, divisor: f64, rng: &mut RngStream) -> Result<f64> {
    if !(divisor > 0.0) || !divisor.is_finite() {
        return Err(Error::param(format!("batch divisor must be > 0, got {divisor}")));
    }
    if !(multiplier >= 0.0) {
        return Err(Error::param("multiplier must be >= 0"));
    }
    let noise = if multiplier > 0.0 {
        multiplier * rng.next_normal()
    } else {
        0.0
    };
    Ok((count as f64 + noise) / divisor)
}

/// Source of sanitized aggregates. The trainer obtains every noisy quantity
/// through this trait, which lets tests observe exactly what was released.
pub trait Mechanism {
    fn sanitize_sum(
        &mut self,
        vectors: &[Vector],
        dim: usize,
        sensitivity: f64,
        multiplier: f64,
        divisor: f64,
        rng: &mut RngStream,
    ) -> Result<Vector>;

    fn sanitize_count(
        &mut self,
        count: usize,
        multiplier: f64,
        divisor: f64,
        rng: &mut RngStream,
    ) -> Result<f64>;
}

/// The plain Gaussian mechanism.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianMechanism;

impl Mechanism for GaussianMechanism {
    fn sanitize_sum(
        &mut self,
        vectors: &[Vector],
        dim: usize,
        sensitivity: f64,
        multiplier: f64,
        divisor: f64,
        rng: &mut RngStream,
    ) -> Result<Vector> {
        sanitize_sum(vectors, dim, sensitivity, multiplier, divisor, rng)
    }

    fn sanitize_count(
        &mut self,
        count: usize,
        multiplier: f64,
        divisor: f64,
        rng: &mut RngStream,
    ) -> Result<f64> {
        sanitize_count(count, multiplier, divisor, rng)
    }
}

/// Noise multipliers for a pair of parallel queries charged as one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSplit {
    /// Multiplier of the equivalent single query.
    pub nu: f64,
    /// Multiplier of the auxiliary query (q-vector sum or clipped count).
    pub nu_q: f64,
    /// Multiplier of the clipped-gradient sum.
    pub nu_g: f64,
}

/// `nu_g = (nu^-2 - nu_q^-2)^(-1/2)`.
pub fn split_noise(nu: f64, nu_q: f64) -> Result<NoiseSplit> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::param(format!("nu must be > 0, got {nu}")));
    }
    if !(nu_q > nu) {
        return Err(Error::param(format!(
            "cannot split nu = {nu} with nu_q = {nu_q}: need nu_q > nu"
        )));
    }
    let r = nu / nu_q;
    let nu_g = nu / (1.0 - r * r).sqrt();
    Ok(NoiseSplit { nu, nu_q, nu_g })
}

/// The `nu_q` for which the split gives `nu_g = (1 + overhead) * nu`.
pub fn nu_q_for_overhead(nu: f64, overhead: f64) -> Result<f64> {
    if !(nu > 0.0) || !(overhead > 0.0) {
        return Err(Error::param(format!(
            "need nu > 0 and overhead > 0, got nu = {nu}, overhead = {overhead}"
        )));
    }
    let inv = 1.0 / (1.0 + overhead);
    Ok(nu / (1.0 - inv * inv).sqrt())
}

/// Split with the default 1% overhead on `nu_g`.
pub fn default_split(nu: f64) -> Result<NoiseSplit> {
    split_noise(nu, nu_q_for_overhead(nu, DEFAULT_OVERHEAD)?)
}
