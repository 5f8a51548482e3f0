//! The acceptance suite: eleven pass/fail criteria with pinned tolerances.
//!
//! Criteria 1 to 10 run inside a four-thread pool; criterion 11 reruns them
//! on a single thread and compares every value and standard error bit for bit.

use std::time::Instant;

use mvbismut::bismut::{bismut_run, gradient_norm_bound, GFunction};
use mvbismut::flow::propagate_v;
use mvbismut::functions::Coordinate;
use mvbismut::hamiltonian::{compute_gramians, kalman_rank};
use mvbismut::initial::{sample_ensemble, GaussianLaw};
use mvbismut::models::ControlledChain;
use mvbismut::noise::NoiseSource;
use mvbismut::oracle::empirical_tv;
use mvbismut::{simulate, stats, TimeGrid};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{EstimatorKind, FSpec, GChoice, LawSpec, ModelConfig, PhiSpec, ScenarioConfig};
use crate::error::RunError;
use crate::output::ResultRow;
use crate::registry::{self, BuiltModel};
use crate::runner::{run_estimator, tv_scenario};
use crate::sweep::{convergence_sweep, SweepAxis};

/// Tolerances and problem sizes, fixed by the acceptance contract.
pub mod tol {
    pub const SE_MULTIPLE: f64 = 3.0;
    pub const SCENARIO_PARTICLES: usize = 100_000;
    pub const SCENARIO_STEPS: usize = 200;
    pub const ANALYTIC_ABS: f64 = 0.02;
    pub const SCENARIO_SECONDS: f64 = 30.0;
    pub const INDICATOR_PARTICLES: usize = 1_000_000;
    pub const INDICATOR_SECONDS: f64 = 60.0;
    pub const FD_EPSILON: f64 = 1e-3;
    /// Moment bound slack factor is `1 + MOMENT_DT_FACTOR * dt`.
    pub const MOMENT_DT_FACTOR: f64 = 10.0;
    pub const TV_SHIFT: f64 = 0.3;
    pub const TV_CHECK_SHIFT: f64 = 0.1;
    pub const TV_CHECK_SAMPLES: usize = 1_000_000;
    pub const TV_CHECK_BINS: usize = 64;
    pub const TV_CHECK_ABS: f64 = 0.005;
    pub const GRAMIAN_STEPS: usize = 1_000;
    pub const GRAMIAN_TERMINAL: f64 = 1.0 / 6.0;
    pub const GRAMIAN_ABS: f64 = 1e-4;
    pub const DT_SLOPE: (f64, f64) = (1.0, 0.3);
    pub const N_SLOPE: (f64, f64) = (-0.5, 0.1);
    pub const EPS_SLOPE: (f64, f64) = (1.0, 0.3);
    pub const THREAD_COUNTS: (usize, usize) = (4, 1);
    /// Round-off floor for comparisons involving a finite difference: the
    /// quotient `(f(x + eps phi) - f(x)) / eps` carries an error of order
    /// `u |x| / eps` that its standard error does not see.
    pub fn fd_rounding_floor(eps: f64) -> f64 {
        1e3 * f64::EPSILON / eps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} | {} | {} ({:.1} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcceptanceReport {
    pub outcomes: Vec<CriterionOutcome>,
    pub rows: Vec<ResultRow>,
}

impl AcceptanceReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

type Verdict = Result<(bool, String), RunError>;

struct Suite {
    rows: Vec<ResultRow>,
    outcomes: Vec<CriterionOutcome>,
}

impl Suite {
    fn run(&mut self, id: u8, title: &'static str, f: impl FnOnce(&mut Vec<ResultRow>) -> Verdict) {
        let start = Instant::now();
        let (passed, detail) = match f(&mut self.rows) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        self.outcomes.push(CriterionOutcome {
            id,
            title,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

fn scenario() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::mean_field_ou();
    cfg.particles = tol::SCENARIO_PARTICLES;
    cfg.grid.n_steps = tol::SCENARIO_STEPS;
    cfg.epsilon = tol::FD_EPSILON;
    cfg
}

fn estimate(
    rows: &mut Vec<ResultRow>,
    cfg: &ScenarioConfig,
    kind: EstimatorKind,
) -> Result<mvbismut::estimate::EstimatorResult, RunError> {
    let built = registry::build_model(&cfg.model)?;
    let (r, wall) = run_estimator(cfg, &built, kind)?;
    rows.push(ResultRow::from_estimate(&cfg.id, &r, wall));
    Ok(r)
}

fn scalar_row(id: &str, method: &str, value: f64, std_error: f64, grid: &TimeGrid, n: usize, seed: u64) -> ResultRow {
    ResultRow {
        scenario_id: id.to_string(),
        method: method.to_string(),
        value,
        std_error,
        n_samples: n,
        dt: grid.dt(),
        n_particles: n,
        seed,
        wall_time_seconds: 0.0,
    }
}

fn within(a: &mvbismut::estimate::EstimatorResult, b: &mvbismut::estimate::EstimatorResult, floor: f64) -> bool {
    a.agrees_with(b, tol::SE_MULTIPLE, floor)
}

fn in_band(x: f64, (centre, half): (f64, f64)) -> bool {
    (x - centre).abs() <= half
}

fn criterion_1(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut cfg = scenario();
    cfg.id = "c01_three_way".into();
    let start = Instant::now();
    let b = estimate(rows, &cfg, EstimatorKind::Bismut)?;
    let p = estimate(rows, &cfg, EstimatorKind::Pathwise)?;
    let fd = estimate(rows, &cfg, EstimatorKind::FiniteDifference)?;
    let secs = start.elapsed().as_secs_f64();
    let exact = (-0.5f64).exp();
    let floor = tol::fd_rounding_floor(cfg.epsilon);
    let pairwise = within(&b, &p, 0.0) && within(&b, &fd, floor) && within(&p, &fd, floor);
    let analytic = [&b, &p, &fd].iter().all(|r| (r.value - exact).abs() <= tol::ANALYTIC_ABS);
    Ok((
        pairwise && analytic && secs < tol::SCENARIO_SECONDS,
        format!(
            "bismut {:.5} +- {:.1e}, pathwise {:.5}, fd {:.5}, exact {exact:.5}, {secs:.1} s",
            b.value, b.std_error, p.value, fd.value
        ),
    ))
}

fn criterion_2(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut cfg = scenario();
    cfg.id = "c02_classical_limit".into();
    cfg.model.params.insert("c".into(), 0.0);
    let b = estimate(rows, &cfg, EstimatorKind::Bismut)?;
    let exact = (-1.0f64).exp();
    Ok((
        b.is_near(exact, tol::SE_MULTIPLE, 0.0),
        format!("bismut {:.5} +- {:.1e} vs exp(-1) = {exact:.5}", b.value, b.std_error),
    ))
}

fn criterion_3(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut cfg = scenario();
    cfg.id = "c03_g_linear".into();
    let lin = estimate(rows, &cfg, EstimatorKind::Bismut)?;
    cfg.id = "c03_g_smoothstep".into();
    cfg.g = GChoice::Smoothstep;
    let smooth = estimate(rows, &cfg, EstimatorKind::Bismut)?;
    Ok((
        within(&lin, &smooth, 0.0),
        format!(
            "t/T {:.5} +- {:.1e}, smoothstep {:.5} +- {:.1e}",
            lin.value, lin.std_error, smooth.value, smooth.std_error
        ),
    ))
}

fn criterion_4(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut cfg = scenario();
    cfg.id = "c04_indicator".into();
    cfg.particles = tol::INDICATOR_PARTICLES;
    cfg.f = FSpec::Indicator {
        index: 0,
        threshold: 0.0,
    };
    let start = Instant::now();
    let b = estimate(rows, &cfg, EstimatorKind::Bismut)?;
    let fd = estimate(rows, &cfg, EstimatorKind::FiniteDifference)?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        within(&b, &fd, 0.0) && secs < tol::INDICATOR_SECONDS,
        format!(
            "bismut {:.5} +- {:.1e}, fd {:.5} +- {:.1e}, {secs:.1} s",
            b.value, b.std_error, fd.value, fd.std_error
        ),
    ))
}

fn criterion_5(rows: &mut Vec<ResultRow>) -> Verdict {
    let grid = TimeGrid::new(1.0, tol::SCENARIO_STEPS)?;
    let mut worst = 0.0f64;
    let mut ok = true;
    for id in registry::MODEL_IDS {
        let built = registry::build_model(&ModelConfig {
            id: id.into(),
            params: registry::default_params(id),
        })?;
        let model = built.coefficients();
        let d = model.dim();
        // the tanh kernel is a full pairwise sum, so keep that ensemble small
        let n = if matches!(built, BuiltModel::Nonlinear(_)) { 500 } else { 10_000 };
        let traj = simulate(model, &GaussianLaw::standard(d), grid, n, 5)?;
        let phi = registry::build_phi(&PhiSpec::Named { name: "ones".into() }, d)?;
        let norms = propagate_v(&traj, phi.as_ref(), model)?.mean_square_norms();
        let k_t = model.bound_k(grid.horizon());
        let mut model_worst = 0.0f64;
        for (k, m) in norms.iter().enumerate() {
            let cap = (8.0 * k_t * grid.time(k)).exp() * (1.0 + tol::MOMENT_DT_FACTOR * grid.dt());
            let ratio = m / norms[0] / cap;
            model_worst = model_worst.max(ratio);
        }
        ok &= model_worst <= 1.0;
        worst = worst.max(model_worst);
        rows.push(scalar_row(&format!("c05_{id}"), "moment_ratio", model_worst, 0.0, &grid, n, 5));
    }
    Ok((ok, format!("largest E|v_t|^2 / (E|phi|^2 bound) = {worst:.4}")))
}

fn criterion_6(rows: &mut Vec<ResultRow>) -> Verdict {
    let cfg = scenario();
    let built = registry::build_model(&cfg.model)?;
    let model = built.coefficients();
    let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.n_steps)?;
    let law = GaussianLaw::standard(1);
    let phi = registry::build_phi(&cfg.phi, 1)?;
    let run = bismut_run(model, &law, phi.as_ref(), grid, cfg.particles, cfg.seed, &GFunction::linear(1.0))?;
    let est = run.estimate(&Coordinate(0), true, mvbismut::estimate::Method::Bismut)?;
    let variance = stats::sample_variance(&run.terminal);
    let k = |t: f64| model.bound_k(t);
    let lambda = |t: f64| model.bound_lambda(t);
    let bound = gradient_norm_bound(&k, &lambda, &grid, variance)?;
    let id = "c06_gradient_bound";
    rows.push(ResultRow::from_estimate(id, &est, 0.0));
    rows.push(scalar_row(id, "gradient_bound", bound, 0.0, &grid, cfg.particles, cfg.seed));
    Ok((
        est.value.abs() <= bound + tol::SE_MULTIPLE * est.std_error,
        format!("|{:.5}| <= {bound:.3} (Var f(X_T) = {variance:.4})", est.value),
    ))
}

fn criterion_7(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut cfg = scenario();
    cfg.id = "c07_tv_bound".into();
    cfg.comparison = Some(LawSpec::Gaussian {
        mean: vec![tol::TV_SHIFT],
        std: vec![1.0],
    });
    let report = tv_scenario(&cfg)?;
    let (tv, bound) = (report.rows[0].value, report.rows[1].value);
    rows.extend(report.rows.iter().cloned());

    let n = tol::TV_CHECK_SAMPLES;
    let a = sample_ensemble(&GaussianLaw::standard(1), n, &NoiseSource::new(71))?;
    let b = sample_ensemble(&GaussianLaw::new(vec![tol::TV_CHECK_SHIFT], vec![1.0])?, n, &NoiseSource::new(72))?;
    let check = empirical_tv(a.states(), b.states(), tol::TV_CHECK_BINS)?;
    let exact = 2.0 * Normal::standard().cdf(tol::TV_CHECK_SHIFT / 2.0) - 1.0;
    let grid = TimeGrid::new(1.0, 1)?;
    rows.push(scalar_row("c07_tv_gaussian_shift", "tv_empirical", check, 0.0, &grid, n, 71));
    Ok((
        report.passed() && (check - exact).abs() <= tol::TV_CHECK_ABS,
        format!(
            "tv {tv:.4} <= bound {bound:.3}; shifted Gaussians {check:.4} vs {exact:.4}"
        ),
    ))
}

fn kinetic(phi: Vec<f64>, id: &str) -> ScenarioConfig {
    let mut cfg = scenario();
    cfg.id = id.into();
    cfg.model = ModelConfig {
        id: "kinetic_langevin".into(),
        params: registry::default_params("kinetic_langevin"),
    };
    cfg.phi = PhiSpec::Constant { value: phi };
    cfg.estimators = vec![EstimatorKind::Degenerate, EstimatorKind::FiniteDifference];
    cfg
}

fn criterion_8(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for (phi, id) in [(vec![1.0, 0.0], "c08_kinetic_position"), (vec![0.0, 1.0], "c08_kinetic_velocity")] {
        let cfg = kinetic(phi, id);
        let exact = registry::closed_form(&cfg).expect("kinetic closed form");
        let deg = estimate(rows, &cfg, EstimatorKind::Degenerate)?;
        let fd = estimate(rows, &cfg, EstimatorKind::FiniteDifference)?;
        ok &= within(&deg, &fd, tol::fd_rounding_floor(cfg.epsilon));
        ok &= deg.is_near(exact, tol::SE_MULTIPLE, 0.0);
        detail.push(format!("{:.4} +- {:.1e} (fd {:.4}, exact {exact})", deg.value, deg.std_error, fd.value));
    }
    let cfg = kinetic(vec![1.0, 0.0], "c08_gramian");
    let built = registry::build_model(&cfg.model)?;
    let ham = built.hamiltonian().expect("kinetic is hamiltonian");
    let grid = TimeGrid::new(1.0, tol::GRAMIAN_STEPS)?;
    let path = vec![0.0; (grid.n_steps() + 1) * 2];
    let gram = compute_gramians(ham, &path, &grid)?;
    let q_t = gram.q[grid.n_steps()][0];
    rows.push(scalar_row("c08_gramian", "q_terminal", q_t, 0.0, &grid, 1, 0));
    ok &= (q_t - tol::GRAMIAN_TERMINAL).abs() <= tol::GRAMIAN_ABS && gram.violations.is_empty();
    detail.push(format!(
        "Q_T = {q_t:.6}, (Q) ratio max {:.4}, violations {}",
        gram.max_ratio(),
        gram.violations.len()
    ));
    Ok((ok, detail.join("; ")))
}

fn criterion_9(rows: &mut Vec<ResultRow>) -> Verdict {
    let (rank, full) = kalman_rank(&ControlledChain::A, &ControlledChain::B, 2, 1, 1);
    let mut cfg = scenario();
    cfg.id = "c09_example21".into();
    cfg.model = ModelConfig {
        id: "example21_linear".into(),
        params: registry::default_params("example21_linear"),
    };
    cfg.phi = PhiSpec::Named { name: "ones".into() };
    let deg = estimate(rows, &cfg, EstimatorKind::Degenerate)?;
    let fd = estimate(rows, &cfg, EstimatorKind::FiniteDifference)?;
    Ok((
        full && within(&deg, &fd, tol::fd_rounding_floor(cfg.epsilon)),
        format!(
            "kalman rank {rank}/2; degenerate {:.4} +- {:.1e}, fd {:.4} +- {:.1e}",
            deg.value, deg.std_error, fd.value, fd.std_error
        ),
    ))
}

fn criterion_10(rows: &mut Vec<ResultRow>) -> Verdict {
    let mut dt_cfg = scenario();
    dt_cfg.id = "c10_dt_sweep".into();
    dt_cfg.particles = 10_000;
    dt_cfg.estimators = vec![EstimatorKind::Pathwise];
    let dt = convergence_sweep(&dt_cfg, SweepAxis::Dt, &[0.04, 0.02, 0.01])?;

    let mut n_cfg = scenario();
    n_cfg.id = "c10_n_sweep".into();
    n_cfg.estimators = vec![EstimatorKind::Bismut];
    let n = convergence_sweep(&n_cfg, SweepAxis::Particles, &[1_000.0, 10_000.0, 100_000.0])?;

    let mut e_cfg = scenario();
    e_cfg.id = "c10_epsilon_sweep".into();
    e_cfg.model = ModelConfig {
        id: "nonlinear_mv".into(),
        params: registry::default_params("nonlinear_mv"),
    };
    e_cfg.particles = 500;
    e_cfg.grid.n_steps = 50;
    e_cfg.phi = PhiSpec::Named { name: "identity".into() };
    e_cfg.f = FSpec::Named {
        name: "square_norm".into(),
    };
    e_cfg.estimators = vec![EstimatorKind::Pathwise, EstimatorKind::FiniteDifference];
    let eps = convergence_sweep(&e_cfg, SweepAxis::Epsilon, &[0.08, 0.04, 0.02])?;

    for t in [&dt, &n, &eps] {
        rows.extend(t.rows.iter().cloned());
    }
    Ok((
        in_band(dt.slope, tol::DT_SLOPE) && in_band(n.slope, tol::N_SLOPE) && in_band(eps.slope, tol::EPS_SLOPE),
        format!(
            "dt-bias slope {:.3}, N-SE slope {:.3}, epsilon-gap slope {:.3}",
            dt.slope, n.slope, eps.slope
        ),
    ))
}

/// Criteria 1 to 10 in the current thread pool.
pub fn run_criteria() -> (Vec<CriterionOutcome>, Vec<ResultRow>) {
    let mut suite = Suite {
        rows: Vec::new(),
        outcomes: Vec::new(),
    };
    suite.run(1, "three-way agreement, mean-field OU", criterion_1);
    suite.run(2, "classical limit c = 0", criterion_2);
    suite.run(3, "independence of g", criterion_3);
    suite.run(4, "indicator payoff vs finite difference", criterion_4);
    suite.run(5, "moment bound on all built-in models", criterion_5);
    suite.run(6, "gradient bound", criterion_6);
    suite.run(7, "total variation bound", criterion_7);
    suite.run(8, "degenerate formula, kinetic Langevin", criterion_8);
    suite.run(9, "controlled chain: Kalman rank and estimator", criterion_9);
    suite.run(10, "convergence sweeps", criterion_10);
    (suite.outcomes, suite.rows)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, RunError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunError::Unsupported(format!("thread pool: {e}")))
}

/// Runs the whole suite, calling `progress` after each criterion of the
/// first pass and once for the determinism rerun.
pub fn run_acceptance_with(mut progress: impl FnMut(&CriterionOutcome)) -> Result<AcceptanceReport, RunError> {
    let (many, one) = tol::THREAD_COUNTS;
    let (outcomes, rows) = pool(many)?.install(run_criteria);
    for o in &outcomes {
        progress(o);
    }
    let start = Instant::now();
    let (_, rerun) = pool(one)?.install(run_criteria);
    let a: Vec<_> = rows.iter().map(ResultRow::fingerprint).collect();
    let b: Vec<_> = rerun.iter().map(ResultRow::fingerprint).collect();
    let mismatches = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    let last = CriterionOutcome {
        id: 11,
        title: "determinism across thread counts",
        passed: mismatches == 0,
        detail: format!("{} rows compared between {many} and {one} threads, {mismatches} differ", a.len()),
        seconds: start.elapsed().as_secs_f64(),
    };
    progress(&last);
    let mut outcomes = outcomes;
    outcomes.push(last);
    Ok(AcceptanceReport { outcomes, rows })
}

pub fn run_acceptance() -> Result<AcceptanceReport, RunError> {
    run_acceptance_with(|_| {})
}
