//! Command-line driver: train dispatch policies, evaluate them, solve the
//! sample-average oracle, and dump scenarios.

mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use feeder_dispatch::dispatch::{ada_run, baseline_run, pda_run, Algorithm, RunOutcome};
use feeder_dispatch::evaluate::{monte_carlo_eval, saa_oracle, EvalOptions};
use feeder_dispatch::scenario::{csv_header, csv_row, expected_scenario, sample};
use feeder_dispatch::subproblem::slow_cost;

use config::{pool, RunConfig};
use output::{EvalFile, OracleFile, Summary, SCHEMA_VERSION};

/// Caps the worker threads used for Monte-Carlo evaluation.
const THREADS_ENV: &str = "FEEDER_DISPATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "feeder-dispatch", version, about = "Two-timescale stochastic feeder dispatch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration file (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured algorithm; writes trace.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_iters: Option<u64>,
    },
    /// Monte-Carlo evaluation of a trained policy; writes eval.json and CSVs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Summary of a prior run; `<output_dir>/summary.json` by default.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<u64>,
        /// Overrides `eval.seed`.
        #[arg(long)]
        eval_seed: Option<u64>,
    },
    /// Solves the sample-average program over a fixed scenario pool; writes oracle.json.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Pool size; `scenario_pool` from the config by default.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Writes sampled scenarios as CSV.
    ScenarioDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        n: u64,
        /// Output file; `<output_dir>/scenarios.csv` by default.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the expected scenario as a single row instead of samples.
        #[arg(long)]
        expected: bool,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(cfg: &RunConfig) -> Result<(feeder_dispatch::dispatch::Problem, RunOutcome)> {
    let (problem, spec) = cfg.setup()?;
    let source = cfg.training_source(&spec)?;
    let steps = cfg.steps();
    let out = match cfg.algorithm {
        Algorithm::Ada => ada_run(&problem, source.as_ref(), &steps, &cfg.stop)?,
        Algorithm::Pda => pda_run(
            &problem,
            source.as_ref(),
            &steps,
            &cfg.stop,
            cfg.alpha.expect("validated"),
        )?,
        kind => baseline_run(&problem, source.as_ref(), kind, &steps, &cfg.stop, cfg.alpha)?,
    };
    Ok((problem, out))
}

fn cmd_run(
    common: &Common,
    algorithm: Option<Algorithm>,
    alpha: Option<f64>,
    max_iters: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if let Some(a) = algorithm {
        cfg.algorithm = a;
    }
    if alpha.is_some() {
        cfg.alpha = alpha;
    }
    if let Some(m) = max_iters {
        cfg.stop.max_iters = m;
    }
    let (problem, out) = train(&cfg)?;
    ensure_dir(&cfg.output_dir)?;
    output::write_trace(&cfg.output_dir.join("trace.csv"), &problem.model, &out.trace)?;
    let summary = Summary::new(&problem.model, &out, cfg.seed, cfg.alpha);
    output::write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    println!(
        "{}: {} iterations, converged = {}, f(z) = {:.4} $/h, z = {:?}",
        out.algorithm,
        out.iterations,
        out.converged,
        summary.slow_cost,
        out.z.to_vec()
    );
    if out.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "warning: stopped at max_iters = {} without convergence",
            cfg.stop.max_iters
        );
        Ok(ExitCode::from(2))
    }
}

fn cmd_evaluate(
    common: &Common,
    summary_path: Option<PathBuf>,
    n_samples: Option<u64>,
    eval_seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if let Some(n) = n_samples {
        cfg.eval.n_samples = n;
    }
    if let Some(s) = eval_seed {
        cfg.eval.seed = s;
    }
    if cfg.eval.n_samples == 0 {
        bail!("invalid n_samples: must be at least 1");
    }
    let summary_path = summary_path.unwrap_or_else(|| cfg.output_dir.join("summary.json"));
    let summary = Summary::load(&summary_path)?;
    // the policy already fixes the algorithm; alpha is not needed to apply it
    cfg.algorithm = summary.algorithm;
    cfg.alpha = cfg.alpha.or(summary.alpha).or(Some(1.0));
    let (problem, spec) = cfg.setup()?;
    if summary.feeder_name != problem.model.name {
        bail!(
            "summary was trained on feeder {:?}, config names {:?}",
            summary.feeder_name,
            problem.model.name
        );
    }
    let z_len = summary.policy.z().to_vec().len();
    if z_len != problem.model.slow_dim() {
        bail!(
            "summary slow decision has {z_len} entries, feeder needs {}",
            problem.model.slow_dim()
        );
    }
    let report = monte_carlo_eval(
        &problem,
        &spec.with_seed(cfg.eval.seed),
        &summary.policy,
        &EvalOptions {
            n_samples: cfg.eval.n_samples,
            seed: cfg.eval.seed,
            histogram_buses: cfg.eval.histogram_buses.clone(),
        },
    )?;
    ensure_dir(&cfg.output_dir)?;
    output::write_json(
        &cfg.output_dir.join("eval.json"),
        &EvalFile {
            schema_version: SCHEMA_VERSION,
            feeder_name: &problem.model.name,
            algorithm: summary.algorithm,
            report: &report,
        },
    )?;
    for h in &report.histograms {
        output::write_histogram(&cfg.output_dir.join(format!("hist_bus{}.csv", h.bus)), h)?;
    }
    output::write_per_bus(&cfg.output_dir.join("perbus_violations.csv"), &report)?;
    println!(
        "{}: expected cost {:.4} ± {:.4} $/h, violation probability {:.4}, max hard violation {:.3e}",
        summary.algorithm,
        report.expected_cost,
        report.cost_std_error,
        report.violation_prob_overall,
        report.max_hard_violation
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(common: &Common, k: Option<usize>) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    // the oracle has no dual iteration; any alpha keeps validation quiet
    cfg.alpha = cfg.alpha.or(Some(1.0));
    let k = k
        .or(cfg.scenario_pool)
        .context("invalid k: pass --k or set scenario_pool")?;
    if k == 0 {
        bail!("invalid k: must be at least 1");
    }
    let (problem, spec) = cfg.setup()?;
    let scenarios = pool(&spec, k);
    let sol = saa_oracle(&problem, &scenarios)?;
    ensure_dir(&cfg.output_dir)?;
    let file = OracleFile {
        schema_version: SCHEMA_VERSION,
        feeder_name: problem.model.name.clone(),
        k,
        seed: cfg.seed,
        slow_cost: slow_cost(&problem.model, &sol.z),
        z: sol.z,
        cost: sol.cost,
        mean_voltage: sol.mean_voltage,
    };
    output::write_json(&cfg.output_dir.join("oracle.json"), &file)?;
    println!("oracle K = {k}: cost {:.6} $/h, z = {:?}", file.cost, file.z.to_vec());
    Ok(ExitCode::SUCCESS)
}

fn cmd_scenario_dump(common: &Common, n: u64, out: Option<PathBuf>, expected: bool) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    cfg.alpha = cfg.alpha.or(Some(1.0));
    cfg.validate()?;
    let model = cfg.model()?;
    let spec = feeder_dispatch::scenario::ScenarioSpec::new(&model, &cfg.scenario, cfg.seed)?;
    let path = match out {
        Some(p) => p,
        None => {
            ensure_dir(&cfg.output_dir)?;
            cfg.output_dir.join("scenarios.csv")
        }
    };
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(csv_header(&spec))?;
    if expected {
        w.write_record(csv_row(0, &expected_scenario(&spec)))?;
    } else {
        for i in 0..n {
            w.write_record(csv_row(i, &sample(&spec, i)))?;
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("invalid {THREADS_ENV}: expected a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Run {
            common,
            algorithm,
            alpha,
            max_iters,
        } => cmd_run(common, *algorithm, *alpha, *max_iters),
        Command::Evaluate {
            common,
            summary,
            n_samples,
            eval_seed,
        } => cmd_evaluate(common, summary.clone(), *n_samples, *eval_seed),
        Command::Oracle { common, k } => cmd_oracle(common, *k),
        Command::ScenarioDump {
            common,
            n,
            output,
            expected,
        } => cmd_scenario_dump(common, *n, output.clone(), *expected),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
