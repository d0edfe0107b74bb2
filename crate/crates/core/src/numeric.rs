//! Flat-vector arithmetic and seeded Gaussian sampling.
//!
//! Every reduction in this module sums left to right over the index, so
//! results are bitwise reproducible for a given input order.
//!
//! Random draws come from [`RngStream`], a ChaCha8 generator keyed by a
//! 64-bit seed and a 64-bit stream id. Gaussian variates use the basic
//! Box–Muller transform on pairs of uniforms:
//!
//! ```text
//! u1 = 1 - U[0,1)            (so u1 is in (0, 1])
//! u2 = U[0,1)
//! z0 = sqrt(-2 ln u1) * cos(2 pi u2)
//! z1 = sqrt(-2 ln u1) * sin(2 pi u2)
//! ```
//!
//! where `U[0,1)` is the top 53 bits of the next `u64` scaled by 2^-53.
//! `z0` is returned first and `z1` is cached for the following call.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of finite `f64` values with a fixed length.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::degenerate(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(Vector(values))
    }

    /// Wraps values produced by arithmetic on already-validated vectors.
    /// Overflow can still yield non-finite entries; callers that care use [`Vector::is_finite`].
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Vector(values)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Returns `self * factor`.
    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * factor).collect())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Vector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Vector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}

/// Inner product, summed left to right.
pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_slices(a.as_slice(), b.as_slice()))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm.
pub fn norm2(v: &Vector) -> f64 {
    dot_slices(v.as_slice(), v.as_slice()).sqrt()
}

/// `dot(a, b) / (|a| |b|)`. Fails when either vector has zero norm.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero-norm vector"));
    }
    Ok(dot_slices(a.as_slice(), b.as_slice()) / (na * nb))
}

/// Sign of `x` as -1, 0 or 1. Subnormals keep their sign.
pub fn signum(x: f64) -> Result<i32> {
    if x.is_nan() {
        return Err(Error::degenerate("signum of NaN"));
    }
    Ok(if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    })
}

/// `k` values from `lo` to `hi` (both included) with a constant ratio.
pub fn log_space(lo: f64, hi: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::param(format!("log_space needs k >= 2, got {k}")));
    }
    if !(lo > 0.0 && lo.is_finite()) {
        return Err(Error::param(format!("log_space needs lo > 0, got {lo}")));
    }
    if !(hi > lo && hi.is_finite()) {
        return Err(Error::param(format!("log_space needs hi > lo, got {hi}")));
    }
    let a = lo.log10();
    let b = hi.log10();
    let step = (b - a) / (k - 1) as f64;
    let mut out: Vec<f64> = (0..k).map(|i| 10f64.powf(a + step * i as f64)).collect();
    out[0] = lo;
    out[k - 1] = hi;
    Ok(out)
}

/// Deterministic random stream identified by `(seed, stream)`.
///
/// Single-owner: clone it only when an identical replay is wanted.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream {
            seed,
            stream,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal draw (Box–Muller, see module docs).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }
}

/// `dim` independent draws from `N(0, sigma^2)`. `sigma = 0` gives zeros without consuming randomness.
pub fn sample_gaussian(dim: usize, sigma: f64, rng: &mut RngStream) -> Result<Vector> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Vector::zeros(dim));
    }
    Ok(Vector((0..dim).map(|_| sigma * rng.next_normal()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&v(&[1., 2., 3.]), &v(&[4., 5., 6.])).unwrap(), 32.0);
        assert_eq!(dot(&v(&[1., 2.]), &Vector::zeros(2)).unwrap(), 0.0);
        assert_eq!(dot(&v(&[3., 4.]), &v(&[3., 4.])).unwrap(), 25.0);
        assert!(matches!(
            dot(&v(&[1.]), &v(&[1., 2.])),
            Err(Error::Dimension { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm2(&v(&[3., 4.])), 5.0);
        assert_eq!(norm2(&Vector::zeros(3)), 0.0);
        assert_eq!(norm2(&v(&[1., 1., 1., 1.])), 2.0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&v(&[2., 0.]), &v(&[5., 0.])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1., 0.]), &v(&[-3., 0.])).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&v(&[0., 0.]), &v(&[1., 0.])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn signum_examples() {
        assert_eq!(signum(3.2).unwrap(), 1);
        assert_eq!(signum(0.0).unwrap(), 0);
        assert_eq!(signum(-0.0).unwrap(), 0);
        assert_eq!(signum(-1e-300).unwrap(), -1);
        assert_eq!(signum(-5e-324).unwrap(), -1);
        assert!(signum(f64::NAN).is_err());
    }

    #[test]
    fn log_space_decades() {
        let xs = log_space(1e-2, 1e2, 5).unwrap();
        for (x, e) in xs.iter().zip([0.01, 0.1, 1.0, 10.0, 100.0]) {
            assert!((x - e).abs() <= 1e-12 * e, "{x} vs {e}");
        }
    }

    #[test]
    fn log_space_half_decades() {
        let lo = 10f64.powf(-2.5);
        let hi = 10f64.powf(1.5);
        let xs = log_space(lo, hi, 9).unwrap();
        // geometric progression with ratio 10^0.5
        let expected: Vec<f64> = (0..9).map(|i| lo * 10f64.powf(0.5 * i as f64)).collect();
        for (x, e) in xs.iter().zip(&expected) {
            assert!((x - e).abs() <= 1e-12 * e);
        }
        assert!((xs[1] - 0.01).abs() < 1e-14);
        assert!((xs[2] - 0.031_622_776_601_683_79).abs() < 1e-14);
        assert!((xs[8] - 31.622_776_601_683_79).abs() < 1e-12);
    }

    #[test]
    fn log_space_endpoints_and_errors() {
        assert_eq!(log_space(1.0, 10.0, 2).unwrap(), vec![1.0, 10.0]);
        assert!(log_space(1.0, 10.0, 1).is_err());
        assert!(log_space(0.0, 10.0, 3).is_err());
        assert!(log_space(2.0, 1.0, 3).is_err());
    }

    #[test]
    fn gaussian_zero_sigma() {
        let mut rng = RngStream::new(1, 0);
        assert_eq!(sample_gaussian(5, 0.0, &mut rng).unwrap(), Vector::zeros(5));
    }

    #[test]
    fn gaussian_moments() {
        // law of large numbers at n = 1e5: the standard error of the mean is
        // 2/sqrt(1e5) ~ 0.0063 and of the std ~ 0.0045, so +-0.02 is > 3 sigma.
        let mut rng = RngStream::new(2024, 7);
        let x = sample_gaussian(100_000, 2.0, &mut rng).unwrap();
        let n = x.len() as f64;
        let mean = x.as_slice().iter().sum::<f64>() / n;
        let var = x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_determinism_and_streams() {
        let a = sample_gaussian(64, 1.5, &mut RngStream::new(9, 3)).unwrap();
        let b = sample_gaussian(64, 1.5, &mut RngStream::new(9, 3)).unwrap();
        let c = sample_gaussian(64, 1.5, &mut RngStream::new(9, 4)).unwrap();
        let bits = |v: &Vector| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    proptest! {
        #[test]
        fn cauchy_schwarz(a in proptest::collection::vec(-1e3f64..1e3, 1..32), seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, 0);
            let b: Vec<f64> = a.iter().map(|_| rng.next_normal() * 10.0).collect();
            let (a, b) = (v(&a), v(&b));
            let lhs = dot(&a, &b).unwrap().abs();
            let rhs = norm2(&a) * norm2(&b);
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn cosine_of_scaled_copy(a in proptest::collection::vec(-10f64..10.0, 1..16), c in 1e-3f64..1e3) {
            let a = v(&a);
            prop_assume!(norm2(&a) > 1e-6);
            let pos = cosine_similarity(&a, &a.scaled(c)).unwrap();
            let neg = cosine_similarity(&a, &a.scaled(-c)).unwrap();
            prop_assert!((pos - 1.0).abs() < 1e-12);
            prop_assert!((neg + 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_space_geometric(lo_exp in -5f64..2.0, span in 0.1f64..6.0, k in 2usize..40) {
            let lo = 10f64.powf(lo_exp);
            let hi = 10f64.powf(lo_exp + span);
            let xs = log_space(lo, hi, k).unwrap();
            prop_assert_eq!(xs.len(), k);
            let (a, b) = (lo.ln(), hi.ln());
            for w in xs.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
            for (i, x) in xs.iter().enumerate() {
                let expected = a + (b - a) * i as f64 / (k - 1) as f64;
                prop_assert!((x.ln() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }
}
