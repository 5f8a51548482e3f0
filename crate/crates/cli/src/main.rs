use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvbismut_cli::acceptance::run_acceptance_with;
use mvbismut_cli::config::{EstimatorKind, ScenarioConfig};
use mvbismut_cli::output::{write_rows, ResultRow};
use mvbismut_cli::runner::{run_scenario, simulate_scenario, tv_scenario, ScenarioReport};
use mvbismut_cli::sweep::{convergence_sweep, SweepAxis};

#[derive(Parser)]
#[command(name = "mvbismut", version, about = "Lions-derivative estimators for McKean-Vlasov SDEs")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON); the mean-field OU scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    particles: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// CSV destination; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Monte Carlo mean of f(X_T).
    Simulate,
    /// Every estimator listed in the config, with consistency checks.
    Run,
    /// The weighted estimator for non-degenerate noise.
    Bismut,
    /// The weighted estimator for degenerate (Hamiltonian) models.
    Degenerate,
    /// Finite-difference and, for smooth f, pathwise estimates.
    Oracle,
    /// Empirical total variation against the closed-form bound.
    Tv,
    /// Convergence sweep with a fitted log-log slope.
    Sweep {
        /// dt, n or epsilon.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated, strictly monotone.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// The acceptance suite.
    Accept,
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::mean_field_ou(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.particles {
        cfg.particles = n;
    }
    if let Some(n) = common.steps {
        cfg.grid.n_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(rows: &[ResultRow], out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_rows(f, rows)?;
        }
        None => write_rows(io::stdout().lock(), rows)?,
    }
    Ok(())
}

fn report(rep: &ScenarioReport, out: Option<&PathBuf>) -> Result<bool> {
    emit(&rep.rows, out)?;
    let mut err = io::stderr().lock();
    for c in &rep.checks {
        writeln!(err, "{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)?;
    }
    Ok(rep.passed())
}

fn with_estimators(mut cfg: ScenarioConfig, kinds: Vec<EstimatorKind>) -> Result<ScenarioConfig> {
    cfg.estimators = kinds;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if let Verb::Accept = cli.verb {
        let rep = run_acceptance_with(|o| println!("{}", o.line()))?;
        if let Some(p) = &cli.common.out {
            emit(&rep.rows, Some(p))?;
        }
        return Ok(rep.passed());
    }
    let cfg = load(&cli.common)?;
    let out = cli.common.out.as_ref().or(cfg.output.as_ref()).cloned();
    let out = out.as_ref();
    match cli.verb {
        Verb::Simulate => report(&simulate_scenario(&cfg)?, out),
        Verb::Run => report(&run_scenario(&cfg)?, out),
        Verb::Bismut => report(&run_scenario(&with_estimators(cfg, vec![EstimatorKind::Bismut])?)?, out),
        Verb::Degenerate => report(&run_scenario(&with_estimators(cfg, vec![EstimatorKind::Degenerate])?)?, out),
        Verb::Oracle => {
            let mut kinds = vec![EstimatorKind::FiniteDifference];
            if cfg.f.differentiable() {
                kinds.push(EstimatorKind::Pathwise);
            }
            report(&run_scenario(&with_estimators(cfg, kinds)?)?, out)
        }
        Verb::Tv => report(&tv_scenario(&cfg)?, out),
        Verb::Sweep { axis, values } => {
            let table = convergence_sweep(&cfg, axis, &values)?;
            emit(&table.rows, out)?;
            let mut err = io::stderr().lock();
            for (x, e) in table.values.iter().zip(&table.errors) {
                writeln!(err, "{x:>12.6e}  {e:.6e}")?;
            }
            writeln!(err, "log-log slope {:.4} (reference {:?})", table.slope, table.reference)?;
            Ok(true)
        }
        Verb::Accept => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
