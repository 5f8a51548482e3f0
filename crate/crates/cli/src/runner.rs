//! Scenario execution: estimators, oracles and their consistency checks.

use std::time::Instant;

use mvbismut::bismut::{estimate_lions_derivative, tv_bound, BismutOptions, GFunction};
use mvbismut::estimate::{EstimatorResult, Method, RunMetadata};
use mvbismut::hamiltonian::{estimate_lions_derivative_degenerate, DegenerateOptions};
use mvbismut::oracle::{default_bins, empirical_tv_with_se, finite_diff_lions, pathwise_lions, FdScheme};
use mvbismut::{simulate, TimeGrid};

use crate::config::{EstimatorKind, GChoice, ScenarioConfig};
use crate::error::RunError;
use crate::output::ResultRow;
use crate::registry::{self, BuiltModel};

/// Consistency checks allow `3` combined standard errors plus
/// `AGREEMENT_C * (epsilon + dt)` for the discretisation and shift bias.
pub const AGREEMENT_SE: f64 = 3.0;
pub const AGREEMENT_C: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioReport {
    pub rows: Vec<ResultRow>,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn grid_of(cfg: &ScenarioConfig) -> Result<TimeGrid, RunError> {
    Ok(TimeGrid::new(cfg.grid.horizon, cfg.grid.n_steps)?)
}

/// Runs one estimator of the scenario, returning its result and wall time.
pub fn run_estimator(
    cfg: &ScenarioConfig,
    built: &BuiltModel,
    kind: EstimatorKind,
) -> Result<(EstimatorResult, f64), RunError> {
    let model = built.coefficients();
    let d = model.dim();
    let grid = grid_of(cfg)?;
    let law = registry::build_law(cfg.initial.as_ref(), d)?;
    let phi = registry::build_phi(&cfg.phi, d)?;
    let f = registry::build_f(&cfg.f)?;
    let (n, seed) = (cfg.particles, cfg.seed);
    let start = Instant::now();
    let r = match kind {
        EstimatorKind::Bismut => {
            let g = match cfg.g {
                GChoice::Linear => GFunction::linear(grid.horizon()),
                GChoice::Smoothstep => GFunction::smoothstep(grid.horizon()),
            };
            let opts = BismutOptions {
                g,
                centered: cfg.centered,
            };
            estimate_lions_derivative(model, f.as_ref(), law.as_ref(), phi.as_ref(), grid, n, seed, &opts)?
        }
        EstimatorKind::Degenerate => {
            let ham = built
                .hamiltonian()
                .ok_or_else(|| RunError::Unsupported(format!("{} has no degenerate structure", model.name())))?;
            let opts = DegenerateOptions {
                centered: cfg.centered,
                ..DegenerateOptions::default()
            };
            estimate_lions_derivative_degenerate(ham, f.as_ref(), law.as_ref(), phi.as_ref(), grid, n, seed, &opts)?
        }
        EstimatorKind::Pathwise => pathwise_lions(model, f.as_ref(), law.as_ref(), phi.as_ref(), grid, n, seed)?,
        EstimatorKind::FiniteDifference => finite_diff_lions(
            model,
            f.as_ref(),
            law.as_ref(),
            phi.as_ref(),
            cfg.epsilon,
            grid,
            n,
            seed,
            FdScheme::Forward,
        )?,
    };
    Ok((r, start.elapsed().as_secs_f64()))
}

fn slack(cfg: &ScenarioConfig) -> f64 {
    AGREEMENT_C * (cfg.epsilon + cfg.dt())
}

/// Runs every requested estimator and checks them pairwise (and against the
/// closed form where the registry knows one).
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, RunError> {
    cfg.validate()?;
    let built = registry::build_model(&cfg.model)?;
    let mut results = Vec::new();
    let mut report = ScenarioReport::default();
    for &kind in &cfg.estimators {
        let (r, wall) = run_estimator(cfg, &built, kind)?;
        report.rows.push(ResultRow::from_estimate(&cfg.id, &r, wall));
        results.push(r);
    }
    let slack = slack(cfg);
    for (i, a) in results.iter().enumerate() {
        for b in &results[i + 1..] {
            report.checks.push(Check {
                name: format!("{} ~ {}", a.method, b.method),
                passed: a.agrees_with(b, AGREEMENT_SE, slack),
                detail: format!(
                    "|{:.6} - {:.6}| vs 3 x ({:.2e} + {:.2e}) + {slack:.1e}",
                    a.value, b.value, a.std_error, b.std_error
                ),
            });
        }
    }
    if let Some(exact) = registry::closed_form(cfg) {
        for r in &results {
            report.checks.push(Check {
                name: format!("{} ~ closed form", r.method),
                passed: r.is_near(exact, AGREEMENT_SE, slack),
                detail: format!("{:.6} vs {exact:.6} (se {:.2e})", r.value, r.std_error),
            });
        }
    }
    Ok(report)
}

/// Plain Monte Carlo mean of `f(X_T)`.
pub fn simulate_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, RunError> {
    cfg.validate()?;
    let built = registry::build_model(&cfg.model)?;
    let model = built.coefficients();
    let d = model.dim();
    let grid = grid_of(cfg)?;
    let law = registry::build_law(cfg.initial.as_ref(), d)?;
    let f = registry::build_f(&cfg.f)?;
    let start = Instant::now();
    let traj = simulate(model, law.as_ref(), grid, cfg.particles, cfg.seed)?;
    let terminal = traj.terminal();
    let values: Vec<f64> = terminal.particles().map(|x| f.eval(x)).collect();
    let r = EstimatorResult::from_samples(&values, Method::Mean, RunMetadata::new(cfg.seed, grid, cfg.particles))?;
    Ok(ScenarioReport {
        rows: vec![ResultRow::from_estimate(&cfg.id, &r, start.elapsed().as_secs_f64())],
        checks: Vec::new(),
    })
}

/// Empirical total variation between the terminal laws started from
/// `initial` and `comparison`, against the closed-form bound.
pub fn tv_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, RunError> {
    cfg.validate()?;
    let built = registry::build_model(&cfg.model)?;
    let model = built.coefficients();
    let d = model.dim();
    if d != 1 {
        return Err(RunError::Unsupported(format!(
            "total variation runner supports one-dimensional models; {} has dimension {d}",
            model.name()
        )));
    }
    let Some(other) = cfg.comparison.as_ref() else {
        return Err(RunError::Unsupported("tv needs a 'comparison' initial law".into()));
    };
    let grid = grid_of(cfg)?;
    let start = Instant::now();
    let law_a = registry::build_law(cfg.initial.as_ref(), d)?;
    let law_b = registry::build_law(Some(other), d)?;
    let a = simulate(model, law_a.as_ref(), grid, cfg.particles, cfg.seed)?.terminal();
    // an independent seed so the two samples are not coupled
    let b = simulate(model, law_b.as_ref(), grid, cfg.particles, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?.terminal();
    let (tv, se) = empirical_tv_with_se(a.states(), b.states(), default_bins(cfg.particles))?;
    let wall = start.elapsed().as_secs_f64();
    let w2 = registry::gaussian_w2(
        &registry::law_moments(cfg.initial.as_ref(), d),
        &registry::law_moments(Some(other), d),
    );
    let k = |t: f64| model.bound_k(t);
    let lambda = |t: f64| model.bound_lambda(t);
    let bound = tv_bound(&k, &lambda, &grid, w2)?;
    let row = |method: &str, value: f64, std_error: f64| ResultRow {
        scenario_id: cfg.id.clone(),
        method: method.to_string(),
        value,
        std_error,
        n_samples: cfg.particles,
        dt: grid.dt(),
        n_particles: cfg.particles,
        seed: cfg.seed,
        wall_time_seconds: wall,
    };
    Ok(ScenarioReport {
        rows: vec![row("tv_empirical", tv, se), row("tv_bound", bound, 0.0)],
        checks: vec![Check {
            name: "empirical tv <= bound".into(),
            passed: tv <= bound + AGREEMENT_SE * se,
            detail: format!("{tv:.5} (se {se:.1e}) vs {bound:.5} at W2 = {w2:.4}"),
        }],
    })
}
