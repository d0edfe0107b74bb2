//! The DP-SGD training loop with pluggable threshold and learning-rate
//! strategies. Runs validate periodically and keep the best parameters.
//! Two diagnostics live here too: the cosine-similarity sweep over clipping thresholds and the
//! noise-split Pareto frontier.
//!
//! One iteration:
//!
//! 1. draw a batch (Poisson by default);
//! 2. per-sample gradients, clipped at the current `C`;
//! 3. `g~ = (sum clipped + N(0, (nu_g C)^2 I)) / |B|`;
//! 4. `theta <- theta - rho_t * direction(g~)`;
//! 5. the strategy's auxiliary query (q-vector sum for `oso`, unclipped
//!    count for `quantile`) sanitized with `nu_q`;
//! 6. strategy update of `C` and `rho`.
//!
//! Every noisy quantity is obtained through a [`Mechanism`], so tests can
//! substitute a recording implementation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_nu, AccountingReport, BudgetSpec};
use crate::data::{poisson_sample, uniform_sample, Batch, Dataset, SamplerKind};
use crate::error::{Error, Result};
use crate::mechanisms::{
    clip, nu_q_for_overhead, q_vector, sanitize_sum, split_noise, GaussianMechanism, Mechanism,
    DEFAULT_OVERHEAD,
};
use crate::models::{
    apply_update, evaluate, init_params, per_sample_gradients, MetricKind, ModelParams, ModelSpec,
};
use crate::numeric::{cosine_similarity, log_space, norm2, sample_gaussian, RngStream, Vector};
use crate::strategies::{make_strategy, StepObservation, StrategyKind, StrategyParams};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SAMPLER: u64 = 1;
pub const STREAM_G_NOISE: u64 = 2;
pub const STREAM_AUX_NOISE: u64 = 3;
pub const STREAM_PROBE: u64 = 4;

pub const DEFAULT_EPOCHS: u32 = 10;
pub const DEFAULT_VALIDATION_PERIOD: u64 = 50;

fn default_epochs() -> u32 {
    DEFAULT_EPOCHS
}

fn default_period() -> u64 {
    DEFAULT_VALIDATION_PERIOD
}

fn default_overhead() -> f64 {
    DEFAULT_OVERHEAD
}

fn one() -> u64 {
    1
}

/// Noise multipliers given directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Multipliers {
    /// Multiplier of the combined per-step query. Zero disables noise.
    pub nu: f64,
    /// Auxiliary-query multiplier. Derived from `aux_overhead` when absent.
    #[serde(default)]
    pub nu_q: Option<f64>,
    /// When set, the run reports the epsilon its steps spend at this delta.
    #[serde(default)]
    pub delta: Option<f64>,
}

/// Target `(eps, delta)` from which the multiplier is calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub eps: f64,
    pub delta: f64,
    /// Number of equally sized runs sharing the budget.
    #[serde(default = "one")]
    pub num_runs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub strategy_params: StrategyParams,
    pub rho0: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    /// Expected batch size. The Poisson rate is `batch_size / |D|`.
    pub batch_size: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub multipliers: Option<Multipliers>,
    #[serde(default)]
    pub budget: Option<Budget>,
    /// Fractional increase of `nu_g` over `nu` paid for the auxiliary query.
    #[serde(default = "default_overhead")]
    pub aux_overhead: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_period")]
    pub validation_period: u64,
    #[serde(default)]
    pub non_private: bool,
}

impl TrainConfig {
    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.validation_period == 0 {
            return Err(Error::config("validation_period", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.rho0 > 0.0) || !self.rho0.is_finite() {
            return Err(Error::config("rho0", "must be finite and > 0"));
        }
        if !(self.aux_overhead > 0.0) || !self.aux_overhead.is_finite() {
            return Err(Error::config("aux_overhead", "must be finite and > 0"));
        }
        make_strategy(self.strategy, &self.strategy_params, self.rho0)?;
        match (&self.multipliers, &self.budget) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "budget",
                    "give either `multipliers` or `budget`, not both",
                ))
            }
            (None, None) if !self.non_private => {
                return Err(Error::config(
                    "budget",
                    "a private run needs `multipliers` or `budget`",
                ))
            }
            _ => {}
        }
        if let Some(m) = &self.multipliers {
            if !(m.nu >= 0.0) || !m.nu.is_finite() {
                return Err(Error::config("multipliers.nu", "must be finite and >= 0"));
            }
            if let Some(q) = m.nu_q {
                if !(q > m.nu) || !q.is_finite() {
                    return Err(Error::config("multipliers.nu_q", "must be finite and > nu"));
                }
            }
            if let Some(d) = m.delta {
                if !(d > 0.0 && d < 1.0) {
                    return Err(Error::config("multipliers.delta", "must be in (0, 1)"));
                }
            }
        }
        if let Some(b) = &self.budget {
            if !(b.eps > 0.0) || !b.eps.is_finite() {
                return Err(Error::config("budget.eps", "must be finite and > 0"));
            }
            if !(b.delta > 0.0 && b.delta < 1.0) {
                return Err(Error::config("budget.delta", "must be in (0, 1)"));
            }
            if b.num_runs == 0 {
                return Err(Error::config("budget.num_runs", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Iterations per run: `epochs * ceil(n / batch_size)`.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        u64::from(self.epochs) * n_train.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn sampling_rate(&self, n_train: usize) -> f64 {
        self.batch_size as f64 / n_train as f64
    }
}

/// Multipliers in force for a run, with the privacy spent by its steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub nu: f64,
    pub nu_q: Option<f64>,
    pub nu_g: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub accounting: Option<AccountingReport>,
}

/// Derives the run's multipliers from metadata only; no sample is read.
pub fn resolve_noise(config: &TrainConfig, n_train: usize) -> Result<NoisePlan> {
    config.validate()?;
    if n_train == 0 {
        return Err(Error::degenerate("empty training set"));
    }
    if config.batch_size > n_train {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the training set size {n_train}", config.batch_size),
        ));
    }
    let steps = config.total_steps(n_train);
    let sampling_rate = config.sampling_rate(n_train);
    let aux = config.strategy.uses_aux_query();
    let silent = |nu: f64| NoisePlan {
        nu,
        nu_q: aux.then_some(0.0),
        nu_g: 0.0,
        sampling_rate,
        steps,
        accounting: None,
    };
    if config.non_private {
        return Ok(silent(0.0));
    }
    let (nu, nu_q_given, budget) = match (&config.multipliers, &config.budget) {
        (Some(m), None) => {
            let budget = m.delta.map(|delta| BudgetSpec {
                eps_total: f64::INFINITY,
                delta,
                sampling_rate,
                steps_per_run: steps,
                num_runs: 1,
            });
            (m.nu, m.nu_q, budget)
        }
        (None, Some(b)) => {
            let spec = BudgetSpec {
                eps_total: b.eps,
                delta: b.delta,
                sampling_rate,
                steps_per_run: steps,
                num_runs: b.num_runs,
            };
            (calibrate_nu(&spec)?, None, Some(spec))
        }
        _ => unreachable!("checked by validate"),
    };
    if nu == 0.0 {
        return Ok(silent(0.0));
    }
    let (nu_q, nu_g) = if aux {
        let q = match nu_q_given {
            Some(q) => q,
            None => nu_q_for_overhead(nu, config.aux_overhead)?,
        };
        let split = split_noise(nu, q)?;
        (Some(split.nu_q), split.nu_g)
    } else {
        (None, nu)
    };
    let accounting = budget
        .map(|b| AccountingReport::new(&b, nu, nu_q, nu_g))
        .transpose()?;
    Ok(NoisePlan {
        nu,
        nu_q,
        nu_g,
        sampling_rate,
        steps,
        accounting,
    })
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub metric: MetricKind,
    /// `(iteration, metric)` on the full test set.
    pub validations: Vec<(u64, f64)>,
    pub best_iteration: u64,
    pub best_metric: f64,
    /// `C_t` used at each executed iteration.
    pub clip_trajectory: Vec<f64>,
    /// `rho_t` used at each executed iteration.
    pub rho_trajectory: Vec<f64>,
    pub iterations: u64,
    pub diverged: bool,
    pub noise: NoisePlan,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub best_params: Option<ModelParams>,
}

impl RunResult {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let strip = |r: &RunResult| RunResult {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Hooks into the loop. Every method defaults to doing nothing.
pub trait TrainObserver {
    /// Exact per-sample gradients of the batch, before clipping and before the update.
    fn on_gradients(&mut self, _ctx: &StepContext<'_>, _rows: &[Vector]) -> Result<()> {
        Ok(())
    }

    /// The direction and step size handed to the parameter update, with the new parameters.
    fn on_update(&mut self, _iteration: u64, _direction: &Vector, _rho: f64, _params: &ModelParams) {}

    /// Sanitized quantities handed to the strategy.
    fn on_observation(&mut self, _iteration: u64, _obs: &StepObservation) {}
}

/// State visible to [`TrainObserver::on_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub iteration: u64,
    pub clip: f64,
    pub divisor: f64,
    pub noise: &'a NoisePlan,
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Trains with the Gaussian mechanism and no observer.
pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<RunResult> {
    train_with(config, train_set, test_set, &mut GaussianMechanism, &mut NoObserver)
}

fn is_finite_all(v: &Vector) -> bool {
    v.as_slice().iter().all(|x| x.is_finite())
}

/// Trains with a caller-supplied mechanism and observer.
pub fn train_with(
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mechanism: &mut dyn Mechanism,
    observer: &mut dyn TrainObserver,
) -> Result<RunResult> {
    let start = Instant::now();
    let noise = resolve_noise(config, train_set.len())?;
    let spec = &config.model;
    spec.check_dataset(train_set)?;
    spec.check_dataset(test_set)?;
    if test_set.is_empty() {
        return Err(Error::degenerate("empty test set"));
    }
    let n = train_set.len();
    let dim = spec.num_params();
    let metric = MetricKind::for_spec(spec);
    let divisor = config.batch_size as f64;

    let mut init_rng = RngStream::new(config.seed, STREAM_INIT);
    let mut sampler_rng = RngStream::new(config.seed, STREAM_SAMPLER);
    let mut g_rng = RngStream::new(config.seed, STREAM_G_NOISE);
    let mut aux_rng = RngStream::new(config.seed, STREAM_AUX_NOISE);

    let mut params = init_params(spec, &mut init_rng)?;
    let mut state = make_strategy(config.strategy, &config.strategy_params, config.rho0)?;
    let nu_q = noise.nu_q.unwrap_or(0.0);

    let mut validations = Vec::new();
    let mut best: Option<(u64, f64, ModelParams)> = None;
    let mut clip_trajectory = Vec::with_capacity(noise.steps as usize);
    let mut rho_trajectory = Vec::with_capacity(noise.steps as usize);
    let mut diverged = false;
    let mut last_valid = 0u64;

    let mut validate = |t: u64, p: &ModelParams, validations: &mut Vec<(u64, f64)>| -> Result<()> {
        let m = evaluate(spec, p, test_set)?.value;
        validations.push((t, m));
        if best.as_ref().is_none_or(|(_, b, _)| metric.better(m, *b)) {
            best = Some((t, m, p.clone()));
        }
        Ok(())
    };

    for t in 1..=noise.steps {
        let batch: Batch = match config.sampler {
            SamplerKind::Poisson => poisson_sample(n, noise.sampling_rate, &mut sampler_rng)?,
            SamplerKind::Uniform => uniform_sample(n, config.batch_size, &mut sampler_rng)?,
        };
        let c = state.clip;
        let rho = state.rho;
        clip_trajectory.push(c);
        rho_trajectory.push(rho);

        // an empty batch skips the gradients but still releases noise
        let grads = if batch.is_empty() {
            Default::default()
        } else {
            per_sample_gradients(spec, &params, train_set, &batch)?
        };
        if grads.losses.iter().any(|l| !l.is_finite()) {
            diverged = true;
            break;
        }
        let ctx = StepContext {
            iteration: t,
            clip: c,
            divisor,
            noise: &noise,
        };
        observer.on_gradients(&ctx, &grads.rows)?;

        let clipped = grads
            .rows
            .iter()
            .map(|g| clip(g, c))
            .collect::<Result<Vec<_>>>()?;
        let g_tilde = mechanism.sanitize_sum(&clipped, dim, c, noise.nu_g, divisor, &mut g_rng)?;
        if !is_finite_all(&g_tilde) {
            diverged = true;
            break;
        }

        // the frozen second moment is the per-coordinate noise variance; with no noise it falls back to nu = 1
        let nu_v = if noise.nu_g > 0.0 { noise.nu_g } else { 1.0 };
        let v_const = (nu_v * c / divisor).powi(2);
        let direction = state.direction(&g_tilde, v_const)?;
        let next = apply_update(&params, &direction, rho)?;
        if !is_finite_all(&next.theta) {
            diverged = true;
            break;
        }
        params = next;
        last_valid = t;
        observer.on_update(t, &direction, rho, &params);

        let obs = match config.strategy {
            StrategyKind::Oso => {
                let qs = grads
                    .rows
                    .iter()
                    .map(|g| q_vector(g, c))
                    .collect::<Result<Vec<_>>>()?;
                let q_tilde = mechanism.sanitize_sum(&qs, dim, 1.0, nu_q, divisor, &mut aux_rng)?;
                StepObservation {
                    g_tilde,
                    q_tilde: Some(q_tilde),
                    clipped_fraction_noisy: None,
                }
            }
            StrategyKind::Quantile => {
                let count = grads.rows.iter().filter(|g| norm2(g) <= c).count();
                let b = mechanism.sanitize_count(count, nu_q, divisor, &mut aux_rng)?;
                StepObservation {
                    g_tilde,
                    q_tilde: None,
                    clipped_fraction_noisy: Some(b),
                }
            }
            StrategyKind::Fixed | StrategyKind::AdamWosm => StepObservation {
                g_tilde,
                q_tilde: None,
                clipped_fraction_noisy: None,
            },
        };
        let aux_finite = obs.q_tilde.as_ref().is_none_or(is_finite_all)
            && obs.clipped_fraction_noisy.is_none_or(f64::is_finite);
        if !aux_finite {
            diverged = true;
            break;
        }
        observer.on_observation(t, &obs);
        state.observe(obs)?;

        if t % config.validation_period == 0 || t == noise.steps {
            validate(t, &params, &mut validations)?;
        }
    }
    if validations.is_empty() {
        // diverged before the first validation: score the last valid parameters
        validate(last_valid, &params, &mut validations)?;
    }
    let (best_iteration, best_metric, best_params) = best.expect("at least one validation");
    Ok(RunResult {
        metric,
        validations,
        best_iteration,
        best_metric,
        iterations: clip_trajectory.len() as u64,
        clip_trajectory,
        rho_trajectory,
        diverged,
        noise,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        best_params: Some(best_params),
    })
}

/// Extremum of a validation series, earliest iteration on ties.
pub fn select_best(series: &[(u64, f64)], kind: MetricKind) -> Result<(u64, f64)> {
    let mut it = series.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::param("cannot select from an empty validation series"))?;
    Ok(it.fold(first, |acc, cur| if kind.better(cur.1, acc.1) { cur } else { acc }))
}

/// One point of the noise-split frontier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub overhead: f64,
    pub nu_q: f64,
    pub nu_g: f64,
}

/// `(nu_q, nu_g)` pairs costing the same as a single query with multiplier `nu`.
pub fn pareto_frontier(nu: f64, overheads: &[f64]) -> Result<Vec<ParetoRow>> {
    overheads
        .iter()
        .map(|&h| {
            Ok(ParetoRow {
                overhead: h,
                nu_q: nu_q_for_overhead(nu, h)?,
                nu_g: (1.0 + h) * nu,
            })
        })
        .collect()
}

/// Settings of the cosine-similarity probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSweep {
    pub clip_grid: Vec<f64>,
    pub realizations: usize,
    /// Iterations at which to probe. Empty means five evenly spaced iterations.
    #[serde(default)]
    pub probe_iterations: Vec<u64>,
}

impl Default for CosineSweep {
    fn default() -> Self {
        CosineSweep {
            clip_grid: log_space(1e-2, 1e2, 25).expect("valid grid"),
            realizations: 20,
            probe_iterations: Vec::new(),
        }
    }
}

/// `count` iterations evenly spread over `1..=total`, ending at `total`.
pub fn probe_schedule(total: u64, count: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=count)
        .map(|j| ((j * total) / count).max(1))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub iteration: u64,
    pub clip: f64,
    /// `None` when the exact mean gradient is zero.
    pub mean_cosine: Option<f64>,
}

struct CosineProbe<'a> {
    sweep: &'a CosineSweep,
    schedule: Vec<u64>,
    rng: RngStream,
    rows: Vec<CosineRow>,
}

impl TrainObserver for CosineProbe<'_> {
    fn on_gradients(&mut self, ctx: &StepContext<'_>, rows: &[Vector]) -> Result<()> {
        if !self.schedule.contains(&ctx.iteration) {
            return Ok(());
        }
        let dim = rows.first().map_or(0, Vector::len);
        let mut truth = Vector::zeros(dim);
        for g in rows {
            truth.add_assign(g)?;
        }
        let defined = !rows.is_empty() && !truth.is_zero();
        if !defined {
            for &c in &self.sweep.clip_grid {
                self.rows.push(CosineRow {
                    iteration: ctx.iteration,
                    clip: c,
                    mean_cosine: None,
                });
            }
            return Ok(());
        }
        // the same standard-normal draws serve every threshold, scaled by nu_g * C
        let draws = (0..self.sweep.realizations)
            .map(|_| sample_gaussian(dim, 1.0, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        for &c in &self.sweep.clip_grid {
            let clipped = rows.iter().map(|g| clip(g, c)).collect::<Result<Vec<_>>>()?;
            let exact = sanitize_sum(&clipped, dim, c, 0.0, ctx.divisor, &mut self.rng)?;
            let sigma = ctx.noise.nu_g * c / ctx.divisor;
            let mut total = 0.0;
            for z in &draws {
                let mut noisy = exact.clone();
                if sigma > 0.0 && sigma.is_finite() {
                    noisy.axpy(sigma, z)?;
                }
                total += cosine_similarity(&noisy, &truth).unwrap_or(0.0);
            }
            self.rows.push(CosineRow {
                iteration: ctx.iteration,
                clip: c,
                mean_cosine: Some(total / self.sweep.realizations as f64),
            });
        }
        Ok(())
    }
}

/// Trains under `config` and, at each probe iteration, measures how well the
/// sanitized mean clipped gradient at every grid threshold aligns with the
/// exact mean gradient, averaged over noise realizations. Each realization
/// is shared by all thresholds, so the curve over the grid is not blurred by
/// independent draws. The probe draws from its own stream, so the training
/// run is the same as without it.
pub fn cosine_sweep(
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    sweep: &CosineSweep,
) -> Result<(Vec<CosineRow>, RunResult)> {
    if sweep.realizations == 0 {
        return Err(Error::param("realizations must be >= 1"));
    }
    if sweep.clip_grid.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::param("clip grid entries must be > 0"));
    }
    let schedule = if sweep.probe_iterations.is_empty() {
        probe_schedule(config.total_steps(train_set.len()), 5)
    } else {
        sweep.probe_iterations.clone()
    };
    let mut probe = CosineProbe {
        sweep,
        schedule,
        rng: RngStream::new(config.seed, STREAM_PROBE),
        rows: Vec::new(),
    };
    let run = train_with(config, train_set, test_set, &mut GaussianMechanism, &mut probe)?;
    Ok((probe.rows, run))
}
