//! Hyperparameter grids with seed replication and a privacy budget shared
//! across the whole grid.
//!
//! In `per_grid` mode the budget covers every configuration of the grid: one
//! multiplier is calibrated for `#configs` sequentially composed runs and
//! each configuration trains with it. Seed replicates are not charged.
//! `per_run` mode calibrates for a single run instead.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_nu, AccountingReport, BudgetSpec};
use crate::data::{Dataset, SamplerKind};
use crate::error::{Error, Result};
use crate::mechanisms::DEFAULT_OVERHEAD;
use crate::models::{MetricKind, ModelSpec};
use crate::numeric::log_space;
use crate::strategies::{StrategyKind, StrategyParams, DEFAULT_ADAM_RHO0, DEFAULT_GAMMAS};
use crate::trainer::{
    train, Multipliers, TrainConfig, DEFAULT_EPOCHS, DEFAULT_VALIDATION_PERIOD,
};

/// Threshold used by the non-private baseline, far above any gradient norm.
pub const UNCLIPPED: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    #[default]
    PerGrid,
    PerRun,
}

fn default_epochs() -> u32 {
    DEFAULT_EPOCHS
}
fn default_period() -> u64 {
    DEFAULT_VALIDATION_PERIOD
}
fn default_overhead() -> f64 {
    DEFAULT_OVERHEAD
}
fn default_rho_range() -> [f64; 2] {
    [10f64.powf(-2.5), 10f64.powf(1.5)]
}
fn default_clip_range() -> [f64; 2] {
    [1e-2, 1e2]
}
fn default_k() -> usize {
    7
}
fn default_gammas() -> Vec<f64> {
    DEFAULT_GAMMAS.to_vec()
}
fn default_delta() -> f64 {
    1e-5
}
fn default_seeds() -> u64 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub strategy: StrategyKind,
    pub model: ModelSpec,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    pub batch_size: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default = "default_period")]
    pub validation_period: u64,
    #[serde(default = "default_overhead")]
    pub aux_overhead: f64,
    /// Log-spaced learning-rate range, `k` points.
    #[serde(default = "default_rho_range")]
    pub rho_range: [f64; 2],
    /// Log-spaced threshold range, `k` points (fixed and adam_wosm).
    #[serde(default = "default_clip_range")]
    pub clip_range: [f64; 2],
    #[serde(default = "default_k")]
    pub k: usize,
    /// Target quantiles (quantile strategy).
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Untuned strategy parameters shared by every configuration.
    #[serde(default)]
    pub strategy_params: StrategyParams,
    /// Learning rate for adam_wosm, which is tuned over `C` only.
    #[serde(default = "adam_rho")]
    pub adam_rho: f64,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub budget_mode: BudgetMode,
    #[serde(default)]
    pub non_private: bool,
}

fn adam_rho() -> f64 {
    DEFAULT_ADAM_RHO0
}

fn check_range(key: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[1] > r[0] && r[1].is_finite()) {
        return Err(Error::config(key, format!("need 0 < lo < hi, got {r:?}")));
    }
    Ok(())
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", "must be >= 2"));
        }
        check_range("rho_range", self.rho_range)?;
        check_range("clip_range", self.clip_range)?;
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must be in (0, 1)"));
        }
        if !self.non_private && self.eps.is_empty() {
            return Err(Error::config("eps", "a private grid needs at least one epsilon"));
        }
        if let Some(e) = self.eps.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::config("eps", format!("entries must be finite and > 0, got {e}")));
        }
        if self.strategy == StrategyKind::Quantile {
            if self.gammas.is_empty() {
                return Err(Error::config("gammas", "quantile grid needs at least one gamma"));
            }
            if let Some(g) = self.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
                return Err(Error::config("gammas", format!("entries must be in [0, 1], got {g}")));
            }
        }
        if !(self.adam_rho > 0.0) {
            return Err(Error::config("adam_rho", "must be > 0"));
        }
        // every enumerated config must itself be valid
        for mut c in enumerate_configs(self)? {
            if !c.non_private {
                c.multipliers = Some(Multipliers {
                    nu: 1.0,
                    nu_q: None,
                    delta: None,
                });
            }
            c.validate()?;
        }
        Ok(())
    }

    fn template(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            strategy: self.strategy,
            strategy_params: self.strategy_params,
            rho0: 1.0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            sampler: self.sampler,
            multipliers: None,
            budget: None,
            aux_overhead: self.aux_overhead,
            seed: self.base_seed,
            validation_period: self.validation_period,
            non_private: self.non_private,
        }
    }
}

/// Configurations of the grid in a fixed order, without a noise source:
/// [`run_grid`] attaches one per epsilon.
///
/// * fixed: `rho x C`, `k^2` configs
/// * quantile: `rho x gamma`
/// * oso: `rho`, `k` configs
/// * adam_wosm: `C`, `k` configs
pub fn enumerate_configs(spec: &GridSpec) -> Result<Vec<TrainConfig>> {
    let rhos = log_space(spec.rho_range[0], spec.rho_range[1], spec.k)?;
    let clips = log_space(spec.clip_range[0], spec.clip_range[1], spec.k)?;
    let base = spec.template();
    let with = |rho: f64, clip: Option<f64>, gamma: Option<f64>| {
        let mut c = base.clone();
        c.rho0 = rho;
        if clip.is_some() {
            c.strategy_params.clip = clip;
        }
        if gamma.is_some() {
            c.strategy_params.gamma = gamma;
        }
        c
    };
    Ok(match spec.strategy {
        StrategyKind::Fixed => rhos
            .iter()
            .flat_map(|&r| clips.iter().map(move |&c| (r, c)))
            .map(|(r, c)| with(r, Some(c), None))
            .collect(),
        StrategyKind::Quantile => rhos
            .iter()
            .flat_map(|&r| spec.gammas.iter().map(move |&g| (r, g)))
            .map(|(r, g)| with(r, None, Some(g)))
            .collect(),
        StrategyKind::Oso => rhos.iter().map(|&r| with(r, None, None)).collect(),
        StrategyKind::AdamWosm => clips
            .iter()
            .map(|&c| with(spec.adam_rho, Some(c), None))
            .collect(),
    })
}

/// Multiplier shared by every configuration of the grid at one epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBudget {
    pub eps: f64,
    pub num_runs: u64,
    pub nu: f64,
    pub accounting: AccountingReport,
}

/// Calibrates the per-run multiplier for each epsilon. Reads only the training-set size.
pub fn plan_budgets(spec: &GridSpec, n_train: usize) -> Result<Vec<GridBudget>> {
    spec.validate()?;
    if spec.non_private {
        return Ok(Vec::new());
    }
    let configs = enumerate_configs(spec)?;
    let template = &configs[0];
    if n_train == 0 || spec.batch_size > n_train {
        return Err(Error::config(
            "batch_size",
            format!("must be between 1 and the training set size {n_train}"),
        ));
    }
    let num_runs = match spec.budget_mode {
        BudgetMode::PerGrid => configs.len() as u64,
        BudgetMode::PerRun => 1,
    };
    spec.eps
        .iter()
        .map(|&eps| {
            let budget = BudgetSpec {
                eps_total: eps,
                delta: spec.delta,
                sampling_rate: template.sampling_rate(n_train),
                steps_per_run: template.total_steps(n_train),
                num_runs,
            };
            let nu = calibrate_nu(&budget)?;
            let accounting = AccountingReport::new(&budget, nu, None, nu)?;
            Ok(GridBudget {
                eps,
                num_runs,
                nu,
                accounting,
            })
        })
        .collect()
}

/// Mean and spread over seeds of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `None` when every run diverged.
    pub mean: Option<f64>,
    /// Sample standard deviation (`n - 1` denominator); 0 for a single run.
    pub std: Option<f64>,
    pub completed: usize,
    pub diverged: usize,
}

/// Aggregates per-seed metrics; `None` marks a diverged run, excluded but counted.
pub fn aggregate(metrics: &[Option<f64>]) -> Result<Aggregate> {
    if metrics.is_empty() {
        return Err(Error::param("nothing to aggregate"));
    }
    let done: Vec<f64> = metrics.iter().flatten().copied().collect();
    let diverged = metrics.len() - done.len();
    if done.is_empty() {
        return Ok(Aggregate {
            mean: None,
            std: None,
            completed: 0,
            diverged,
        });
    }
    // sorting first makes the sums independent of seed order
    let mut sorted = done.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = if sorted.len() < 2 {
        0.0
    } else {
        (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Aggregate {
        mean: Some(mean),
        std: Some(std),
        completed: done.len(),
        diverged,
    })
}

/// One configuration at one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub strategy: StrategyKind,
    /// `None` for non-private grids.
    pub eps: Option<f64>,
    pub rho: f64,
    #[serde(rename = "C")]
    pub clip: Option<f64>,
    pub gamma: Option<f64>,
    pub mean_metric: Option<f64>,
    pub std: Option<f64>,
    pub diverged: usize,
    pub nu: f64,
    pub eps_achieved: Option<f64>,
}

/// Outcome of a single seed of a single configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub row: usize,
    pub seed: u64,
    pub best_metric: f64,
    pub best_iteration: u64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub metric: MetricKind,
    pub rows: Vec<GridRow>,
    pub runs: Vec<RunSummary>,
    pub budgets: Vec<GridBudget>,
}

impl GridResult {
    /// Index of the best row by mean metric among rows with the given epsilon; first on ties.
    pub fn best_row(&self, eps: Option<f64>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.rows.iter().enumerate() {
            if r.eps != eps {
                continue;
            }
            if let Some(m) = r.mean_metric {
                if best.is_none_or(|(_, b)| self.metric.better(m, b)) {
                    best = Some((i, m));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    /// Per-seed metrics of a row, in seed order.
    pub fn row_runs(&self, row: usize) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(move |r| r.row == row)
    }
}

fn row_of(config: &TrainConfig, eps: Option<f64>, nu: f64, eps_achieved: Option<f64>, agg: Aggregate) -> GridRow {
    let (clip, gamma) = match config.strategy {
        StrategyKind::Fixed | StrategyKind::AdamWosm => (config.strategy_params.clip, None),
        StrategyKind::Quantile => (None, config.strategy_params.gamma),
        StrategyKind::Oso => (None, None),
    };
    GridRow {
        strategy: config.strategy,
        eps,
        rho: config.rho0,
        clip,
        gamma,
        mean_metric: agg.mean,
        std: agg.std,
        diverged: agg.diverged,
        nu,
        eps_achieved,
    }
}

fn run_configs(
    configs: &[TrainConfig],
    seeds: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    budgets: &[Option<GridBudget>],
    delta: f64,
) -> Result<GridResult> {
    let metric = MetricKind::for_spec(&configs[0].model);
    let mut jobs = Vec::new();
    for (b, budget) in budgets.iter().enumerate() {
        for (c, config) in configs.iter().enumerate() {
            for s in 0..seeds {
                let mut cfg = config.clone();
                cfg.seed = config.seed.wrapping_add(s);
                if let Some(gb) = budget {
                    cfg.multipliers = Some(Multipliers {
                        nu: gb.nu,
                        nu_q: None,
                        delta: Some(delta),
                    });
                }
                jobs.push((b * configs.len() + c, cfg));
            }
        }
    }
    let outcomes = jobs
        .par_iter()
        .map(|(row, cfg)| {
            train(cfg, train_set, test_set).map(|r| RunSummary {
                row: *row,
                seed: cfg.seed,
                best_metric: r.best_metric,
                best_iteration: r.best_iteration,
                diverged: r.diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (b, budget) in budgets.iter().enumerate() {
        for (c, config) in configs.iter().enumerate() {
            let row = b * configs.len() + c;
            let metrics: Vec<Option<f64>> = outcomes
                .iter()
                .filter(|o| o.row == row)
                .map(|o| (!o.diverged).then_some(o.best_metric))
                .collect();
            let agg = aggregate(&metrics)?;
            rows.push(match budget {
                Some(gb) => row_of(config, Some(gb.eps), gb.nu, Some(gb.accounting.eps_total), agg),
                None => row_of(config, None, 0.0, None, agg),
            });
        }
    }
    Ok(GridResult {
        metric,
        rows,
        runs: outcomes,
        budgets: budgets.iter().flatten().copied().collect(),
    })
}

/// Runs every configuration with every seed at every epsilon.
pub fn run_grid(spec: &GridSpec, train_set: &Dataset, test_set: &Dataset) -> Result<GridResult> {
    let budgets: Vec<Option<GridBudget>> = if spec.non_private {
        vec![None]
    } else {
        plan_budgets(spec, train_set.len())?.into_iter().map(Some).collect()
    };
    spec.validate()?;
    let configs = enumerate_configs(spec)?;
    run_configs(&configs, spec.seeds, train_set, test_set, &budgets, spec.delta)
}

/// Non-private, unclipped SGD tuned over the learning rate only.
pub fn non_private_baseline(spec: &GridSpec, train_set: &Dataset, test_set: &Dataset) -> Result<GridResult> {
    let baseline = GridSpec {
        strategy: StrategyKind::Oso,
        non_private: true,
        ..spec.clone()
    };
    baseline.validate()?;
    let configs: Vec<TrainConfig> = enumerate_configs(&baseline)?
        .into_iter()
        .map(|mut c| {
            c.strategy = StrategyKind::Fixed;
            c.strategy_params = StrategyParams {
                clip: Some(UNCLIPPED),
                ..Default::default()
            };
            c
        })
        .collect();
    run_configs(&configs, spec.seeds, train_set, test_set, &[None], spec.delta)
}

/// Column order of the results file.
pub const CSV_HEADER: [&str; 10] = [
    "strategy",
    "eps",
    "rho",
    "C",
    "gamma",
    "mean_metric",
    "std",
    "diverged",
    "nu",
    "eps_achieved",
];

/// Writes one row per configuration and epsilon.
pub fn write_csv<W: Write>(result: &GridResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in &result.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    if result.rows.is_empty() {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
