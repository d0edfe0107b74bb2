//! Per-iteration update rules for the clipping threshold `C` and the
//! learning rate `rho`.
//!
//! * `fixed`: `C` and `rho` never change.
//! * `quantile`: geometric tracking of a target quantile `gamma` of the
//!   per-sample gradient norms, `C <- C exp(-eta_c (b - gamma))` where `b` is
//!   the noisy fraction of samples with norm at most `C`.
//! * `oso`: hypergradient sign updates. With `g` the sanitized mean clipped
//!   gradient and `q` the sanitized mean q-vector,
//!   `C <- C exp(rho_c sign(g_t . q_{t-1}))` and
//!   `rho <- rho exp(rho_r sign(g_t . g_{t-1}))`. The stored vectors start
//!   absent (equivalently zero), so the first step changes nothing.
//! * `adam_wosm`: Adam first moment with the second moment frozen to the
//!   per-coordinate variance of the privacy noise, `(nu_g C / |B|)^2`. This
//!   is an approximate reading of the published baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{check_len, dot, signum, Vector};

pub const DEFAULT_C0: f64 = 0.1;
pub const DEFAULT_RHO_C: f64 = 2.5e-3;
pub const DEFAULT_RHO_R: f64 = 2.5e-3;
pub const DEFAULT_ETA_C: f64 = 0.2;
pub const DEFAULT_GAMMAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_EPS_STAB: f64 = 1e-8;
pub const DEFAULT_ADAM_RHO0: f64 = 1e-3;

// keeps C and rho strictly positive and finite under any observation stream
const MIN_SCALE: f64 = 1e-300;
const MAX_SCALE: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fixed,
    Quantile,
    Oso,
    AdamWosm,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Fixed => "fixed",
            StrategyKind::Quantile => "quantile",
            StrategyKind::Oso => "oso",
            StrategyKind::AdamWosm => "adam_wosm",
        }
    }

    /// Whether each step releases a second sanitized query charged through the noise split.
    pub fn uses_aux_query(self) -> bool {
        matches!(self, StrategyKind::Quantile | StrategyKind::Oso)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tunables as they appear in config files. Unset values take kind defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyParams {
    /// Clipping threshold (fixed, adam_wosm) or its initial value (quantile, oso).
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub rho_c: Option<f64>,
    #[serde(default)]
    pub rho_r: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub eta_c: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub eps_stab: Option<f64>,
}

/// Sanitized quantities released at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepObservation {
    pub g_tilde: Vector,
    pub q_tilde: Option<Vector>,
    pub clipped_fraction_noisy: Option<f64>,
}

/// Hyperparameter state of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyState {
    pub kind: StrategyKind,
    pub clip: f64,
    pub rho: f64,
    pub prev_g_tilde: Option<Vector>,
    pub prev_q_tilde: Option<Vector>,
    pub rho_c: f64,
    pub rho_r: f64,
    pub gamma: f64,
    pub eta_c: f64,
    pub beta1: f64,
    pub eps_stab: f64,
    pub first_moment: Option<Vector>,
    pub steps: u64,
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be finite and > 0, got {v}")))
    }
}

fn clamp_scale(x: f64) -> f64 {
    if x.is_nan() {
        return MIN_SCALE;
    }
    x.clamp(MIN_SCALE, MAX_SCALE)
}

/// Builds the initial state. `rho0` is the starting learning rate.
pub fn make_strategy(kind: StrategyKind, params: &StrategyParams, rho0: f64) -> Result<StrategyState> {
    let rho = positive("rho", rho0)?;
    let required_clip = || {
        params
            .clip
            .ok_or_else(|| Error::config("strategy.clip", format!("required by strategy `{kind}`")))
            .and_then(|c| positive("strategy.clip", c))
    };
    let clip = match kind {
        StrategyKind::Fixed | StrategyKind::AdamWosm => required_clip()?,
        StrategyKind::Quantile | StrategyKind::Oso => {
            positive("strategy.clip", params.clip.unwrap_or(DEFAULT_C0))?
        }
    };
    let gamma = match (kind, params.gamma) {
        (StrategyKind::Quantile, None) => {
            return Err(Error::config("strategy.gamma", "required by strategy `quantile`"))
        }
        (_, Some(g)) if !(0.0..=1.0).contains(&g) => {
            return Err(Error::config("strategy.gamma", format!("must be in [0, 1], got {g}")))
        }
        (_, g) => g.unwrap_or(0.5),
    };
    let beta1 = params.beta1.unwrap_or(DEFAULT_BETA1);
    if !(0.0..1.0).contains(&beta1) {
        return Err(Error::config("strategy.beta1", "must be in [0, 1)"));
    }
    let eps_stab = params.eps_stab.unwrap_or(DEFAULT_EPS_STAB);
    if !(eps_stab >= 0.0) {
        return Err(Error::config("strategy.eps_stab", "must be >= 0"));
    }
    Ok(StrategyState {
        kind,
        clip,
        rho,
        prev_g_tilde: None,
        prev_q_tilde: None,
        rho_c: positive("strategy.rho_c", params.rho_c.unwrap_or(DEFAULT_RHO_C))?,
        rho_r: positive("strategy.rho_r", params.rho_r.unwrap_or(DEFAULT_RHO_R))?,
        gamma,
        eta_c: positive("strategy.eta_c", params.eta_c.unwrap_or(DEFAULT_ETA_C))?,
        beta1,
        eps_stab,
        first_moment: None,
        steps: 0,
    })
}

/// Estimate of dL/dC through one SGD step: `-rho * g_t . q_{t-1}`.
#[allow(non_snake_case)]
pub fn dC_additive(g_tilde_t: &Vector, q_tilde_prev: &Vector, rho: f64) -> Result<f64> {
    Ok(-rho * dot(g_tilde_t, q_tilde_prev)?)
}

/// Threshold after one OSO step; unchanged when no previous q-vector is stored.
pub fn oso_threshold_step(state: &StrategyState, obs: &StepObservation) -> Result<f64> {
    let Some(prev_q) = &state.prev_q_tilde else {
        return Ok(state.clip);
    };
    let s = signum(dot(&obs.g_tilde, prev_q)?)?;
    Ok(clamp_scale(state.clip * (state.rho_c * f64::from(s)).exp()))
}

/// Learning rate after one OSO step; unchanged when no previous gradient is stored.
pub fn oso_lr_step(state: &StrategyState, obs: &StepObservation) -> Result<f64> {
    let Some(prev_g) = &state.prev_g_tilde else {
        return Ok(state.rho);
    };
    let s = signum(dot(&obs.g_tilde, prev_g)?)?;
    Ok(clamp_scale(state.rho * (state.rho_r * f64::from(s)).exp()))
}

/// Threshold after one quantile-tracking step.
pub fn quantile_step(state: &StrategyState, obs: &StepObservation) -> Result<f64> {
    let b = obs
        .clipped_fraction_noisy
        .ok_or_else(|| Error::param("quantile step needs the noisy unclipped fraction"))?;
    if b.is_nan() {
        return Err(Error::degenerate("noisy unclipped fraction is NaN"));
    }
    Ok(clamp_scale(state.clip * (-state.eta_c * (b - state.gamma)).exp()))
}

/// Updates the biased first moment in place and returns
/// `m_hat / (sqrt(v_const) + eps_stab)` with `m_hat = m / (1 - beta1^t)`.
pub fn adam_wosm_direction(
    g_tilde: &Vector,
    first_moment: &mut Vector,
    beta1: f64,
    v_const: f64,
    eps_stab: f64,
    step: u64,
) -> Result<Vector> {
    check_len(first_moment.len(), g_tilde.len())?;
    if !(v_const > 0.0) {
        return Err(Error::param(format!("v_const must be > 0, got {v_const}")));
    }
    let m = first_moment.as_mut_slice();
    for (mi, gi) in m.iter_mut().zip(g_tilde.as_slice()) {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
    }
    let correction = 1.0 - beta1.powi(step.max(1).min(i32::MAX as u64) as i32);
    let denom = correction * (v_const.sqrt() + eps_stab);
    Ok(Vector::from_raw(m.iter().map(|mi| mi / denom).collect()))
}

impl StrategyState {
    /// Direction handed to the parameter update. `v_const` is only read by `adam_wosm`.
    pub fn direction(&mut self, g_tilde: &Vector, v_const: f64) -> Result<Vector> {
        match self.kind {
            StrategyKind::AdamWosm => {
                let m = self
                    .first_moment
                    .get_or_insert_with(|| Vector::zeros(g_tilde.len()));
                adam_wosm_direction(g_tilde, m, self.beta1, v_const, self.eps_stab, self.steps + 1)
            }
            _ => Ok(g_tilde.clone()),
        }
    }

    /// Consumes the step's sanitized observation and updates `C` and `rho`.
    pub fn observe(&mut self, obs: StepObservation) -> Result<()> {
        match self.kind {
            StrategyKind::Fixed | StrategyKind::AdamWosm => {}
            StrategyKind::Quantile => self.clip = quantile_step(self, &obs)?,
            StrategyKind::Oso => {
                if let Some(q) = &obs.q_tilde {
                    check_len(obs.g_tilde.len(), q.len())?;
                } else {
                    return Err(Error::param("oso step needs a sanitized q-vector"));
                }
                let clip = oso_threshold_step(self, &obs)?;
                let rho = oso_lr_step(self, &obs)?;
                self.clip = clip;
                self.rho = rho;
                self.prev_q_tilde = obs.q_tilde;
                self.prev_g_tilde = Some(obs.g_tilde);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn oso() -> StrategyState {
        make_strategy(StrategyKind::Oso, &StrategyParams::default(), 1.0).unwrap()
    }

    fn obs(g: &[f64], q: &[f64]) -> StepObservation {
        StepObservation {
            g_tilde: v(g),
            q_tilde: Some(v(q)),
            clipped_fraction_noisy: None,
        }
    }

    #[test]
    fn defaults() {
        let s = oso();
        assert_eq!((s.clip, s.rho_c, s.rho_r), (0.1, 2.5e-3, 2.5e-3));
        let q = make_strategy(
            StrategyKind::Quantile,
            &StrategyParams {
                gamma: Some(0.5),
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        assert_eq!((q.clip, q.eta_c), (0.1, 0.2));
    }

    #[test]
    fn missing_params_name_the_key() {
        for kind in [StrategyKind::Fixed, StrategyKind::AdamWosm] {
            let err = make_strategy(kind, &StrategyParams::default(), 0.1).unwrap_err();
            assert!(matches!(&err, Error::Config { key, .. } if key == "strategy.clip"), "{err}");
        }
        let err = make_strategy(StrategyKind::Quantile, &StrategyParams::default(), 0.1).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "strategy.gamma"));
        assert!(make_strategy(StrategyKind::Oso, &StrategyParams::default(), 0.0).is_err());
    }

    #[test]
    fn dc_additive_examples() {
        assert_eq!(dC_additive(&v(&[1., 2.]), &Vector::zeros(2), 0.5).unwrap(), 0.0);
        let d = dC_additive(&v(&[1., 2.]), &v(&[0.5, 0.25]), 0.5).unwrap();
        assert_eq!(d, -0.5);
        assert_eq!(dC_additive(&v(&[-1., -2.]), &v(&[0.5, 0.25]), 0.5).unwrap(), 0.5);
        assert!(dC_additive(&v(&[1.]), &v(&[1., 2.]), 1.0).is_err());
    }

    #[test]
    fn oso_threshold_examples() {
        let mut s = oso();
        s.prev_q_tilde = Some(v(&[1.0, 0.0]));
        let c = oso_threshold_step(&s, &obs(&[2.0, 5.0], &[0.0, 0.0])).unwrap();
        assert!((c - 0.100_250_312_760_579_4).abs() < 1e-15, "{c}");
        assert_eq!(oso_threshold_step(&s, &obs(&[0.0, 5.0], &[0.0, 0.0])).unwrap(), 0.1);
        let mut s = oso();
        let c0 = s.clip;
        for _ in 0..1000 {
            s.observe(obs(&[1.0, 1.0], &[1.0, 0.0])).unwrap();
        }
        // the first step has no stored q, so 999 positive steps
        assert!(((s.clip / c0).ln() - 999.0 * 2.5e-3).abs() < 1e-12);
        s.observe(obs(&[1.0, 1.0], &[1.0, 0.0])).unwrap();
        assert!((s.clip / c0 - 2.5f64.exp()).abs() < 1e-12 * 2.5f64.exp());
    }

    #[test]
    fn first_oso_step_is_inert() {
        let mut s = oso();
        s.observe(obs(&[3.0, -1.0], &[1.0, 1.0])).unwrap();
        assert_eq!((s.clip, s.rho), (0.1, 1.0));
        assert!(s.prev_q_tilde.is_some() && s.prev_g_tilde.is_some());
    }

    #[test]
    fn oso_lr_examples() {
        let mut s = oso();
        s.prev_g_tilde = Some(v(&[1.0, 2.0]));
        let up = oso_lr_step(&s, &obs(&[1.0, 2.0], &[0., 0.])).unwrap();
        assert!((up - 2.5e-3f64.exp()).abs() < 1e-15);
        let down = oso_lr_step(&s, &obs(&[-1.0, -2.0], &[0., 0.])).unwrap();
        assert!((down - (-2.5e-3f64).exp()).abs() < 1e-15);
        assert_eq!(oso_lr_step(&s, &obs(&[2.0, -1.0], &[0., 0.])).unwrap(), 1.0);
    }

    #[test]
    fn quantile_examples() {
        let s = make_strategy(
            StrategyKind::Quantile,
            &StrategyParams {
                gamma: Some(0.5),
                clip: Some(1.0),
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        let at = |b: f64| {
            quantile_step(
                &s,
                &StepObservation {
                    g_tilde: Vector::zeros(1),
                    q_tilde: None,
                    clipped_fraction_noisy: Some(b),
                },
            )
            .unwrap()
        };
        assert_eq!(at(0.5), 1.0);
        assert!((at(1.0) - (-0.1f64).exp()).abs() < 1e-15);
        assert!((at(1.0) - 0.904_837_418_035_959_6).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for b in [-0.5, 0.0, 0.2, 0.5, 0.8, 1.0, 1.7] {
            let c = at(b);
            assert!(c < last);
            last = c;
        }
    }

    #[test]
    fn adam_wosm_examples() {
        let g = v(&[1.0, -2.0, 3.0]);
        let mut m = Vector::zeros(3);
        assert_eq!(adam_wosm_direction(&g, &mut m, 0.0, 1.0, 0.0, 1).unwrap(), g);

        let mut m1 = Vector::zeros(3);
        let mut m2 = Vector::zeros(3);
        let d1 = adam_wosm_direction(&g, &mut m1, 0.9, 4.0, 1e-8, 1).unwrap();
        let d2 = adam_wosm_direction(&g.scaled(3.0), &mut m2, 0.9, 4.0, 1e-8, 1).unwrap();
        for (a, b) in d1.as_slice().iter().zip(d2.as_slice()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }

        // constant input: biased moment approaches g as 1 - beta1^t, the corrected one is exact
        let mut m = Vector::zeros(3);
        for t in 1..=30u64 {
            let d = adam_wosm_direction(&g, &mut m, 0.9, 1.0, 0.0, t).unwrap();
            let gap = 0.9f64.powi(t as i32);
            for (mi, gi) in m.as_slice().iter().zip(g.as_slice()) {
                assert!((mi - gi * (1.0 - gap)).abs() < 1e-12);
            }
            for (di, gi) in d.as_slice().iter().zip(g.as_slice()) {
                assert!((di - gi).abs() < 1e-12);
            }
        }
        assert!(adam_wosm_direction(&g, &mut m, 0.9, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn fixed_is_constant() {
        let mut s = make_strategy(
            StrategyKind::Fixed,
            &StrategyParams {
                clip: Some(1.0),
                ..Default::default()
            },
            0.3,
        )
        .unwrap();
        for i in 0..50 {
            s.observe(obs(&[i as f64, 1.0], &[1.0, -1.0])).unwrap();
            assert_eq!((s.clip, s.rho), (1.0, 0.3));
        }
    }

    proptest! {
        #[test]
        fn oso_log_scale_structure(signs in proptest::collection::vec(-1i32..=1, 1..400)) {
            let mut s = oso();
            s.prev_q_tilde = Some(v(&[1.0]));
            s.prev_g_tilde = Some(v(&[1.0]));
            let c0 = s.clip;
            let mut total = 0i64;
            for &sg in &signs {
                let o = StepObservation { g_tilde: v(&[f64::from(sg)]), q_tilde: Some(v(&[1.0])), clipped_fraction_noisy: None };
                s.clip = oso_threshold_step(&s, &o).unwrap();
                total += i64::from(sg);
                prop_assert!(s.clip > 0.0);
            }
            prop_assert!((s.clip.ln() - (c0.ln() + 2.5e-3 * total as f64)).abs() < 1e-12);
        }

        #[test]
        fn positivity_under_fuzzed_streams(
            seq in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e3f64..1e3), 1..200)
        ) {
            let mut o = oso();
            o.rho_c = 5.0;
            o.rho_r = 5.0;
            let mut q = make_strategy(StrategyKind::Quantile, &StrategyParams { gamma: Some(0.3), ..Default::default() }, 1.0).unwrap();
            for (a, b, frac) in seq {
                o.observe(obs(&[a, b], &[b, a])).unwrap();
                q.observe(StepObservation { g_tilde: v(&[a]), q_tilde: None, clipped_fraction_noisy: Some(frac) }).unwrap();
                prop_assert!(o.clip > 0.0 && o.rho > 0.0 && o.clip.is_finite() && o.rho.is_finite());
                prop_assert!(q.clip > 0.0 && q.clip.is_finite());
            }
        }

        #[test]
        fn dc_sign_matches_threshold_move(g in proptest::collection::vec(-5f64..5.0, 3), q in proptest::collection::vec(-1f64..1.0, 3)) {
            let mut s = oso();
            s.prev_q_tilde = Some(v(&q));
            let o = obs(&g, &[0., 0., 0.]);
            let d = dC_additive(&o.g_tilde, &v(&q), s.rho).unwrap();
            let c = oso_threshold_step(&s, &o).unwrap();
            // descent on C: C grows exactly when dL/dC < 0
            prop_assert_eq!(c > s.clip, d < 0.0);
            prop_assert_eq!(c < s.clip, d > 0.0);
        }
    }
}
