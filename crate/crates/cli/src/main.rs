//! Command-line front end: single runs, grids, accountant queries and diagnostics.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use oso_dpsgd::accountant::{calibrate_nu, verify_budget, BudgetSpec};
use oso_dpsgd::gridsearch::{enumerate_configs, plan_budgets, run_grid, write_csv};
use oso_dpsgd::mechanisms::{nu_q_for_overhead, split_noise, DEFAULT_OVERHEAD};
use oso_dpsgd::models::save_checkpoint;
use oso_dpsgd::trainer::{cosine_sweep, pareto_frontier, resolve_noise, train};

use crate::config::{load_config, ConfigFile};

/// `println!` that treats a closed stdout (as when piped into `head`) as the end of output.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                eprintln!("error: cannot write to stdout: {e}");
            }
        }
    }};
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] oso_dpsgd::Error),
}

impl CliError {
    fn config(key: &str, message: &str) -> Self {
        CliError::Usage(format!("config error at `{key}`: {message}"))
    }

    fn json(path: &Path, e: serde_json::Error) -> Self {
        CliError::Usage(format!("config {}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Runtime(oso_dpsgd::Error::Config { .. }) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(std::io::Error::other(e.to_string()).into())
    }
}

/// Differentially private SGD with online threshold and learning-rate tuning.
///
/// Config files are JSON with a `data` section (`{"synthetic": {...}}` or
/// `{"idx": {...}}`) and `train`, `grid` or `cosine` sections. Unset keys
/// take their defaults: 10 epochs, validation every 50 iterations, Poisson
/// sampling, 1% noise overhead for the auxiliary query, grid granularity 7,
/// rho in [10^-2.5, 10^1.5], C in [1e-2, 1e2], gamma in {0.1,0.3,0.5,0.7,0.9},
/// 5 seeds, delta 1e-5, per-grid budget.
#[derive(Debug, Parser)]
#[command(name = "oso-dpsgd", version)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "OSO_DPSGD_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all hardware threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set seeds=3` or `--set data.synthetic.n=500`.
    /// Keys without a section prefix refer to the command's section.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Enumerate and calibrate only; no training and no dataset reads beyond headers.
    #[arg(long)]
    dry_run: bool,
    /// Disable noise and accounting.
    #[arg(long)]
    non_private: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration (`train` section).
    Train(RunArgs),
    /// Run a hyperparameter grid (`grid` section).
    Grid(RunArgs),
    /// Calibrate the noise multiplier for a budget.
    Accountant {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        /// Sampling rate |B| / |D|.
        #[arg(long)]
        rate: f64,
        /// Steps per run.
        #[arg(long)]
        steps: u64,
        /// Runs sharing the budget.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Fractional increase of nu_g over nu for the auxiliary query.
        #[arg(long, default_value_t = DEFAULT_OVERHEAD)]
        overhead: f64,
    },
    /// Cosine similarity between the noisy clipped and exact mean gradient across thresholds.
    DiagnoseCosine(RunArgs),
    /// Pairs (nu_q, nu_g) that cost the same as one query with multiplier nu.
    DiagnosePareto {
        #[arg(long)]
        nu: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01,0.03,0.1,0.3,1")]
        overheads: Vec<f64>,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_path: &'a Path,
    overrides: &'a [String],
    config: &'a Value,
    dry_run: bool,
    seeds: Vec<u64>,
    accounting: Value,
    outputs: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(oso_dpsgd::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_manifest(out: &Path, m: &Manifest<'_>) -> Result<(), CliError> {
    write_json(&out.join("manifest.json"), m)
}

fn train_section(config: &ConfigFile, non_private: bool) -> Result<oso_dpsgd::trainer::TrainConfig, CliError> {
    let mut tc = config
        .train
        .clone()
        .ok_or_else(|| CliError::config("train", "section is required by this command"))?;
    tc.non_private |= non_private;
    tc.validate()?;
    Ok(tc)
}

fn cmd_train(out: &Path, args: &RunArgs) -> Result<(), CliError> {
    let (config, resolved) = load_config(&args.config, "train", &args.overrides)?;
    let tc = train_section(&config, args.non_private)?;
    let n_train = config.data.train_len()?;
    let plan = resolve_noise(&tc, n_train)?;
    let mut manifest = Manifest {
        tool: "oso-dpsgd",
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        config_path: &args.config,
        overrides: &args.overrides,
        config: &resolved,
        dry_run: args.dry_run,
        seeds: vec![tc.seed],
        accounting: json!(plan.accounting),
        outputs: Vec::new(),
    };
    fs::create_dir_all(out)?;
    if args.dry_run {
        outln!("{}", serde_json::to_string_pretty(&plan).map_err(oso_dpsgd::Error::from)?);
        return write_manifest(out, &manifest);
    }
    let (tr, te) = config.data.load()?;
    let result = train(&tc, &tr, &te)?;

    write_json(&out.join("run.json"), &result)?;
    let mut w = csv::Writer::from_path(out.join("validations.csv"))?;
    w.write_record(["iteration", "metric"])?;
    for (t, m) in &result.validations {
        w.serialize((t, m))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("trajectory.csv"))?;
    w.write_record(["iteration", "C", "rho"])?;
    for (i, (c, r)) in result.clip_trajectory.iter().zip(&result.rho_trajectory).enumerate() {
        w.serialize((i + 1, c, r))?;
    }
    w.flush()?;
    let mut outputs = vec!["run.json", "validations.csv", "trajectory.csv"];
    if let Some(best) = &result.best_params {
        save_checkpoint(&out.join("best.ckpt"), &tc.model, best)?;
        outputs.push("best.ckpt");
    }
    outln!(
        "best {:?} {} at iteration {}{}",
        result.metric,
        result.best_metric,
        result.best_iteration,
        if result.diverged { " (diverged)" } else { "" }
    );
    manifest.outputs = outputs.into_iter().map(String::from).collect();
    write_manifest(out, &manifest)
}

fn cmd_grid(out: &Path, args: &RunArgs) -> Result<(), CliError> {
    let (config, resolved) = load_config(&args.config, "grid", &args.overrides)?;
    let mut spec = config
        .grid
        .clone()
        .ok_or_else(|| CliError::config("grid", "section is required by this command"))?;
    spec.non_private |= args.non_private;
    spec.validate()?;
    let configs = enumerate_configs(&spec)?;
    let n_train = config.data.train_len()?;
    let budgets = plan_budgets(&spec, n_train)?;
    let mut manifest = Manifest {
        tool: "oso-dpsgd",
        version: env!("CARGO_PKG_VERSION"),
        command: "grid",
        config_path: &args.config,
        overrides: &args.overrides,
        config: &resolved,
        dry_run: args.dry_run,
        seeds: (0..spec.seeds).map(|s| spec.base_seed.wrapping_add(s)).collect(),
        accounting: json!(budgets),
        outputs: Vec::new(),
    };
    fs::create_dir_all(out)?;
    if args.dry_run {
        outln!("{} configurations", configs.len());
        for c in &configs {
            outln!(
                "  rho={} C={} gamma={}",
                c.rho0,
                c.strategy_params.clip.map_or("-".into(), |v| v.to_string()),
                c.strategy_params.gamma.map_or("-".into(), |v| v.to_string()),
            );
        }
        for b in &budgets {
            outln!("eps={} runs={} nu={} eps_achieved={}", b.eps, b.num_runs, b.nu, b.accounting.eps_total);
        }
        return write_manifest(out, &manifest);
    }
    let (tr, te) = config.data.load()?;
    let result = run_grid(&spec, &tr, &te)?;
    write_csv(&result, fs::File::create(out.join("grid.csv"))?)?;
    let best: Vec<Value> = budgets
        .iter()
        .map(|b| Some(b.eps))
        .chain(spec.non_private.then_some(None))
        .map(|eps| json!({"eps": eps, "best": result.best_row(eps).map(|i| &result.rows[i])}))
        .collect();
    write_json(&out.join("summary.json"), &json!({"best": best, "result": result}))?;
    for b in &best {
        outln!("{b}");
    }
    manifest.outputs = vec!["grid.csv".into(), "summary.json".into()];
    write_manifest(out, &manifest)
}

fn cmd_cosine(out: &Path, args: &RunArgs) -> Result<(), CliError> {
    let (config, resolved) = load_config(&args.config, "train", &args.overrides)?;
    let tc = train_section(&config, args.non_private)?;
    let sweep = config.cosine.clone().unwrap_or_default();
    let plan = resolve_noise(&tc, config.data.train_len()?)?;
    let mut manifest = Manifest {
        tool: "oso-dpsgd",
        version: env!("CARGO_PKG_VERSION"),
        command: "diagnose-cosine",
        config_path: &args.config,
        overrides: &args.overrides,
        config: &resolved,
        dry_run: args.dry_run,
        seeds: vec![tc.seed],
        accounting: json!(plan.accounting),
        outputs: Vec::new(),
    };
    fs::create_dir_all(out)?;
    if args.dry_run {
        return write_manifest(out, &manifest);
    }
    let (tr, te) = config.data.load()?;
    let (rows, _) = cosine_sweep(&tc, &tr, &te, &sweep)?;
    let mut w = csv::Writer::from_path(out.join("cosine.csv"))?;
    w.write_record(["iteration", "C", "mean_cosine"])?;
    for r in &rows {
        w.serialize((r.iteration, r.clip, r.mean_cosine))?;
    }
    w.flush()?;
    manifest.outputs = vec!["cosine.csv".into()];
    write_manifest(out, &manifest)
}

fn cmd_accountant(eps: f64, delta: f64, rate: f64, steps: u64, runs: u64, overhead: f64) -> Result<(), CliError> {
    let budget = BudgetSpec {
        eps_total: eps,
        delta,
        sampling_rate: rate,
        steps_per_run: steps,
        num_runs: runs,
    };
    budget.validate()?;
    let nu = calibrate_nu(&budget)?;
    let split = split_noise(nu, nu_q_for_overhead(nu, overhead)?)?;
    let (achieved, _) = verify_budget(nu, &budget);
    outln!("nu\t{}", split.nu);
    outln!("nu_q\t{}", split.nu_q);
    outln!("nu_g\t{}", split.nu_g);
    outln!("eps_achieved\t{achieved}");
    Ok(())
}

fn cmd_pareto(nu: f64, overheads: &[f64]) -> Result<(), CliError> {
    let rows = pareto_frontier(nu, overheads)?;
    outln!("overhead,nu_q,nu_g");
    for r in rows {
        outln!("{},{:.3},{}", r.overhead, r.nu_q, r.nu_g);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(&cli.out, a),
        Command::Grid(a) => cmd_grid(&cli.out, a),
        Command::DiagnoseCosine(a) => cmd_cosine(&cli.out, a),
        Command::Accountant {
            eps,
            delta,
            rate,
            steps,
            runs,
            overhead,
        } => cmd_accountant(*eps, *delta, *rate, *steps, *runs, *overhead),
        Command::DiagnosePareto { nu, overheads } => cmd_pareto(*nu, overheads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
