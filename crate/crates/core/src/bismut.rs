//! Weighted (integration-by-parts) estimator of the directional Lions
//! derivative `D^L_phi (P_T f)(mu)` for non-degenerate diffusions:
//!
//! `D^L_phi (P_T f)(mu) = E[f(X_T) int_0^T <zeta_t, dW_t>]`, with
//! `zeta_t = sigma^{-1}(X_t) [g'(t) v_t + g(t) E<D^L b(y, .)(mu_t)(X_t), v_t>|_{y = X_t}]`
//! for any `C^1` function `g` with `g(0) = 0`, `g(T) = 1`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::estimate::{EstimatorResult, Method, RunMetadata};
use crate::flow::{lions_terms, v_step, VariationalPath};
use crate::functions::{eval_field, TestFunction, VectorField};
use crate::grid::TimeGrid;
use crate::initial::InitialLaw;
use crate::linalg;
use crate::measure::EmpiricalMeasure;
use crate::model::CoefficientModel;
use crate::sim::{ParticleSystem, TrajectoryBundle};
use crate::stats::{self, CHUNK};

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Time weight `g` together with its derivative.
#[derive(Clone)]
pub struct GFunction {
    horizon: f64,
    label: String,
    g: Scalar,
    dg: Scalar,
}

impl std::fmt::Debug for GFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GFunction")
            .field("horizon", &self.horizon)
            .field("label", &self.label)
            .finish()
    }
}

impl GFunction {
    /// `g(t) = t / T`.
    pub fn linear(horizon: f64) -> Self {
        Self {
            horizon,
            label: "linear".into(),
            g: Arc::new(move |t| t / horizon),
            dg: Arc::new(move |_| 1.0 / horizon),
        }
    }

    /// `g(t) = 3 s^2 - 2 s^3` with `s = t / T`.
    pub fn smoothstep(horizon: f64) -> Self {
        Self {
            horizon,
            label: "smoothstep".into(),
            g: Arc::new(move |t| {
                let s = t / horizon;
                s * s * (3.0 - 2.0 * s)
            }),
            dg: Arc::new(move |t| {
                let s = t / horizon;
                6.0 * s * (1.0 - s) / horizon
            }),
        }
    }

    /// User-supplied `g`, validated on `grid` (see [`validate`](Self::validate)).
    pub fn custom(
        grid: &TimeGrid,
        label: &str,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dg: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let out = Self {
            horizon: grid.horizon(),
            label: label.into(),
            g: Arc::new(g),
            dg: Arc::new(dg),
        };
        out.validate(grid)?;
        Ok(out)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn value(&self, t: f64) -> f64 {
        (self.g)(t)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        (self.dg)(t)
    }

    /// Checks `g(0) = 0`, `g(T) = 1` and that `g'` matches a difference
    /// quotient of `g` to `1e-6` at every grid point.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(invalid("g horizon does not match the grid"));
        }
        if self.value(0.0).abs() > 1e-12 || (self.value(self.horizon) - 1.0).abs() > 1e-12 {
            return Err(invalid("g must satisfy g(0) = 0 and g(T) = 1"));
        }
        let h = 1e-5 * self.horizon;
        for t in grid.points() {
            let (lo, hi) = ((t - h).max(0.0), (t + h).min(self.horizon));
            let fd = (self.value(hi) - self.value(lo)) / (hi - lo);
            // One-sided quotients at the ends carry an O(h) error.
            let tol = if lo == t || hi == t { 1e-6 + 10.0 * h } else { 1e-6 };
            if !((fd - self.derivative(t)).abs() <= tol) {
                return Err(invalid(format!("g' disagrees with difference quotient at t = {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BismutOptions {
    pub g: GFunction,
    /// Subtract the sample mean of `f(X_T)` before weighting.
    pub centered: bool,
}

impl BismutOptions {
    pub fn new(grid: &TimeGrid) -> Self {
        Self {
            g: GFunction::linear(grid.horizon()),
            centered: true,
        }
    }
}

fn require_square(model: &dyn CoefficientModel) -> Result<()> {
    if model.noise_dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "non-degenerate estimator needs a square diffusion",
            expected: model.dim(),
            found: model.noise_dim(),
        });
    }
    Ok(())
}

/// `zeta` at one step for all particles, given the Lions field of `v`.
#[allow(clippy::too_many_arguments)]
fn zeta_step(
    model: &dyn CoefficientModel,
    t: f64,
    x: &[f64],
    v: &[f64],
    field: &[f64],
    g: f64,
    dg: f64,
    out: &mut [f64],
) -> Result<()> {
    let d = model.dim();
    let bad = out
        .par_chunks_mut(CHUNK * d)
        .enumerate()
        .filter_map(|(c, chunk)| {
            let mut inv = vec![0.0; d * d];
            let mut rhs = vec![0.0; d];
            for (r, row) in chunk.chunks_exact_mut(d).enumerate() {
                let i = c * CHUNK + r;
                if !model.diffusion_inv(t, &x[i * d..(i + 1) * d], &mut inv) {
                    return Some(i);
                }
                for a in 0..d {
                    rhs[a] = dg * v[i * d + a] + g * field[i * d + a];
                }
                linalg::mat_vec(&inv, d, d, &rhs, row);
            }
            None
        })
        .min();
    match bad {
        Some(particle) => Err(Error::SingularDiffusion { time: t, particle }),
        None => Ok(()),
    }
}

/// `zeta_k` for every step along a stored trajectory (`n_steps x N x d`).
pub fn zeta(
    v: &VariationalPath,
    traj: &TrajectoryBundle,
    g: &GFunction,
    model: &dyn CoefficientModel,
) -> Result<Vec<f64>> {
    require_square(model)?;
    traj.check_model(model)?;
    let grid = traj.grid();
    if v.n_particles() != traj.n_particles() || v.dim() != traj.dim() || v.n_times() != grid.n_steps() + 1 {
        return Err(invalid("variational path does not match the trajectory"));
    }
    let width = traj.n_particles() * traj.dim();
    let mut out = vec![0.0; grid.n_steps() * width];
    for (k, zk) in out.chunks_exact_mut(width).enumerate() {
        let t = grid.time(k);
        let x = traj.states_at(k);
        let mu = EmpiricalMeasure::new(traj.dim(), x);
        let (field, _) = lions_terms(model, t, &mu, v.at(k));
        zeta_step(model, t, x, v.at(k), &field, g.value(t), g.derivative(t), zk)?;
    }
    Ok(out)
}

/// `sum_k <a_k, b_k>` per particle, accumulating steps in order.
fn accumulate(weights: &mut [f64], a: &[f64], b: &[f64], q: usize) {
    weights
        .par_iter_mut()
        .zip(a.par_chunks_exact(q).zip(b.par_chunks_exact(q)))
        .for_each(|(w, (x, y))| *w += linalg::dot(x, y));
}

/// Left-point Ito sums `sum_k <zeta^i_k, dW^i_k>`.
pub fn ito_weight(zeta: &[f64], traj: &TrajectoryBundle) -> Result<Vec<f64>> {
    let q = traj.noise_dim();
    let width = traj.n_particles() * q;
    if zeta.len() != traj.grid().n_steps() * width {
        return Err(Error::DimensionMismatch {
            context: "zeta",
            expected: traj.grid().n_steps() * width,
            found: zeta.len(),
        });
    }
    let mut weights = vec![0.0; traj.n_particles()];
    for (k, zk) in zeta.chunks_exact(width).enumerate() {
        accumulate(&mut weights, zk, traj.increments_at(k), q);
    }
    Ok(weights)
}

/// Per-particle output of a weighted run: terminal states and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRun {
    pub dim: usize,
    pub terminal: Vec<f64>,
    pub weights: Vec<f64>,
    pub meta: RunMetadata,
}

impl WeightedRun {
    pub fn n_particles(&self) -> usize {
        self.weights.len()
    }

    /// Per-particle samples `(f(X_T) - fbar) W` (or `f(X_T) W` when not centered).
    pub fn samples(&self, f: &dyn TestFunction, centered: bool) -> Vec<f64> {
        let values: Vec<f64> = self.terminal.par_chunks_exact(self.dim).map(|x| f.eval(x)).collect();
        let fbar = if centered { stats::mean(&values) } else { 0.0 };
        values.iter().zip(&self.weights).map(|(v, w)| (v - fbar) * w).collect()
    }

    pub fn estimate(&self, f: &dyn TestFunction, centered: bool, method: Method) -> Result<EstimatorResult> {
        EstimatorResult::from_samples(&self.samples(f, centered), method, self.meta.clone())
    }
}

/// Simulates particles, the initial-direction flow and the weight in one
/// pass, storing nothing but the current step.
#[allow(clippy::too_many_arguments)]
pub fn bismut_run(
    model: &dyn CoefficientModel,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
    g: &GFunction,
) -> Result<WeightedRun> {
    require_square(model)?;
    g.validate(&grid)?;
    let d = model.dim();
    let mut system = ParticleSystem::new(model, law, grid, n_particles, seed)?;
    let mut v = eval_field(phi, system.states(), d)?;
    let mut v_next = vec![0.0; v.len()];
    let mut z = vec![0.0; v.len()];
    let mut weights = vec![0.0; n_particles];
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        system.draw();
        {
            let x = system.states();
            let dw = system.increments();
            let mu = EmpiricalMeasure::new(d, x);
            let (field, sigma_field) = lions_terms(model, t, &mu, &v);
            zeta_step(model, t, x, &v, &field, g.value(t), g.derivative(t), &mut z)?;
            accumulate(&mut weights, &z, dw, d);
            v_step(model, t, grid.dt(), x, &mu, &v, &field, sigma_field.as_deref(), dw, &mut v_next);
        }
        std::mem::swap(&mut v, &mut v_next);
        system.advance()?;
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weights"));
    }
    let meta = RunMetadata::new(seed, grid, n_particles).with_note("g", g.label());
    Ok(WeightedRun {
        dim: d,
        terminal: system.into_states(),
        weights,
        meta,
    })
}

/// Estimates `D^L_phi (P_T f)(mu)` with the weighted formula.
#[allow(clippy::too_many_arguments)]
pub fn estimate_lions_derivative(
    model: &dyn CoefficientModel,
    f: &dyn TestFunction,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
    options: &BismutOptions,
) -> Result<EstimatorResult> {
    let run = bismut_run(model, law, phi, grid, n_particles, seed, &options.g)?;
    let mut r = run.estimate(f, options.centered, Method::Bismut)?;
    r.meta = r.meta.with_note("centered", options.centered);
    Ok(r)
}

/// `int_0^T (1/T + K_t)^2 lambda_t^2 exp(8 K_t t) dt` by the trapezoid rule on `grid`.
pub fn bound_integral(k: &dyn Fn(f64) -> f64, lambda: &dyn Fn(f64) -> f64, grid: &TimeGrid) -> f64 {
    let inv_t = 1.0 / grid.horizon();
    let values: Vec<f64> = grid
        .points()
        .map(|t| {
            let (kt, lt) = (k(t), lambda(t));
            (inv_t + kt).powi(2) * lt * lt * (8.0 * kt * t).exp()
        })
        .collect();
    grid.trapezoid(&values)
}

/// Upper bound on `sup_{mu(|phi|^2) <= 1} |D^L_phi (P_T f)(mu)|` given the
/// variance of `f(X_T)`.
pub fn gradient_norm_bound(
    k: &dyn Fn(f64) -> f64,
    lambda: &dyn Fn(f64) -> f64,
    grid: &TimeGrid,
    variance_proxy: f64,
) -> Result<f64> {
    if !(variance_proxy >= 0.0) {
        return Err(invalid("variance proxy must be non-negative"));
    }
    Ok((variance_proxy * bound_integral(k, lambda, grid)).sqrt())
}

/// Upper bound on the total-variation distance of the time-`T` marginals
/// started from two laws at Wasserstein-2 distance `w2`.
pub fn tv_bound(k: &dyn Fn(f64) -> f64, lambda: &dyn Fn(f64) -> f64, grid: &TimeGrid, w2: f64) -> Result<f64> {
    if !(w2 >= 0.0) {
        return Err(invalid("Wasserstein distance must be non-negative"));
    }
    Ok(w2 * bound_integral(k, lambda, grid).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::propagate_v;
    use crate::functions::{Constant, ConstantField, Coordinate};
    use crate::initial::GaussianLaw;
    use crate::models::{LocalModel, MeanFieldOu};
    use crate::sim::simulate;

    #[test]
    fn g_functions_validate() {
        let grid = TimeGrid::new(2.0, 50).unwrap();
        GFunction::linear(2.0).validate(&grid).unwrap();
        GFunction::smoothstep(2.0).validate(&grid).unwrap();
        assert!(GFunction::custom(&grid, "bad", |t| t / 2.0, |_| 1.0).is_err());
        assert!(GFunction::custom(&grid, "off", |t| t, |_| 1.0).is_err());
    }

    #[test]
    fn zeta_closed_forms() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 50, 1).unwrap();
        let g = GFunction::linear(1.0);
        let zero = propagate_v(&traj, &ConstantField(vec![0.0]), &m).unwrap();
        assert!(zeta(&zero, &traj, &g, &m).unwrap().iter().all(|z| *z == 0.0));

        let v = propagate_v(&traj, &ConstantField(vec![1.0]), &m).unwrap();
        let z = zeta(&v, &traj, &g, &m).unwrap();
        for k in 0..grid.n_steps() {
            let t = grid.time(k);
            let vk = (1.0 - 0.5 * grid.dt()).powi(k as i32);
            let expected = vk * (1.0 + 0.5 * t);
            for zi in &z[k * 50..(k + 1) * 50] {
                assert!((zi - expected).abs() < 1e-12);
            }
        }

        let local = LocalModel {
            dim: 1,
            drift: |_t: f64, x: &[f64], o: &mut [f64]| o[0] = -x[0],
            drift_grad: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = -1.0,
            sigma: 1.0,
            k: 1.0,
        };
        let traj = simulate(&local, &GaussianLaw::standard(1), grid, 20, 2).unwrap();
        let v = propagate_v(&traj, &ConstantField(vec![1.0]), &local).unwrap();
        let z = zeta(&v, &traj, &g, &local).unwrap();
        for k in 0..grid.n_steps() {
            for (zi, vi) in z[k * 20..(k + 1) * 20].iter().zip(v.at(k)) {
                assert_eq!(*zi, vi / 1.0);
            }
        }
    }

    #[test]
    fn unit_zeta_gives_brownian_terminal_values() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n = 20_000;
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, n, 3).unwrap();
        let w = ito_weight(&vec![1.0; 10 * n], &traj).unwrap();
        let (mean, se) = stats::mean_and_se(&w);
        assert!(mean.abs() < 3.0 * se);
        let var = stats::sample_variance(&w);
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
        assert!(ito_weight(&vec![0.0; 10 * n], &traj).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn streaming_run_matches_stored_composition_bitwise() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let n = 2 * CHUNK + 5;
        let law = GaussianLaw::standard(1);
        let phi = ConstantField(vec![1.0]);
        let g = GFunction::smoothstep(1.0);
        let run = bismut_run(&m, &law, &phi, grid, n, 8, &g).unwrap();
        let traj = simulate(&m, &law, grid, n, 8).unwrap();
        let v = propagate_v(&traj, &phi, &m).unwrap();
        let w = ito_weight(&zeta(&v, &traj, &g, &m).unwrap(), &traj).unwrap();
        assert_eq!(run.weights, w);
        assert_eq!(run.terminal, traj.terminal().states());
    }

    #[test]
    fn constant_payoff_has_zero_derivative() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let opts = BismutOptions::new(&grid);
        let r = estimate_lions_derivative(
            &m,
            &Constant(2.0),
            &GaussianLaw::standard(1),
            &ConstantField(vec![1.0]),
            grid,
            1000,
            4,
            &opts,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);
        let raw = BismutOptions { centered: false, ..opts };
        let r = estimate_lions_derivative(
            &m,
            &Constant(2.0),
            &GaussianLaw::standard(1),
            &ConstantField(vec![1.0]),
            grid,
            1000,
            4,
            &raw,
        )
        .unwrap();
        assert!(r.value.abs() < 3.0 * r.std_error);
    }

    #[test]
    fn mean_field_ou_estimate_matches_the_mean_ode() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let r = estimate_lions_derivative(
            &m,
            &Coordinate(0),
            &GaussianLaw::standard(1),
            &ConstantField(vec![1.0]),
            grid,
            20_000,
            5,
            &BismutOptions::new(&grid),
        )
        .unwrap();
        let target = (1.0 - 0.5 * grid.dt()).powi(50);
        assert!(r.is_near(target, 3.0, 0.0), "{r:?}");
    }

    #[test]
    fn bound_examples() {
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let zero = |_t: f64| 0.0;
        let one = |_t: f64| 1.0;
        assert_eq!(gradient_norm_bound(&one, &one, &grid, 0.0).unwrap(), 0.0);
        assert!((gradient_norm_bound(&zero, &one, &grid, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let exact = (4.0 * (8f64.exp() - 1.0) / 8.0).sqrt();
        assert!((gradient_norm_bound(&one, &one, &grid, 1.0).unwrap() - exact).abs() < 1e-3 * exact);
        assert!((exact - 38.60).abs() < 0.01);
        assert!(gradient_norm_bound(&one, &one, &grid, -1.0).is_err());
        assert_eq!(tv_bound(&one, &one, &grid, 0.0).unwrap(), 0.0);
        assert!((tv_bound(&zero, &one, &grid, 0.3).unwrap() - 0.3).abs() < 1e-12);
        let b1 = tv_bound(&one, &one, &grid, 0.2).unwrap();
        assert_eq!(tv_bound(&one, &one, &grid, 0.4).unwrap(), 2.0 * b1);
        assert!(tv_bound(&one, &one, &grid, -0.1).is_err());
    }
}
