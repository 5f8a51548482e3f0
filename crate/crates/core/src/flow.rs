//! Derivative flows along a stored trajectory.
//!
//! * `v`: derivative of the particle system with respect to a shift of the
//!   initial states along `phi`. In the particle scheme this is the exact
//!   derivative of the discrete paths, so it includes the peer average of the
//!   Lions kernel.
//! * `w`: derivative along a Cameron-Martin shift `W + eps h` of the noise,
//!   with the law held fixed (no Lions term).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functions::{eval_field, VectorField};
use crate::linalg;
use crate::measure::EmpiricalMeasure;
use crate::model::CoefficientModel;
use crate::sim::{advance, TrajectoryBundle};
use crate::stats::{self, CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    InitialDirection,
    MalliavinDirection,
}

/// Values of a derivative flow at every grid time, `(n_steps + 1) x N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPath {
    kind: FlowKind,
    dim: usize,
    n_particles: usize,
    values: Vec<f64>,
}

impl VariationalPath {
    pub fn kind(&self) -> FlowKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_times(&self) -> usize {
        self.values.len() / (self.n_particles * self.dim)
    }

    pub fn at(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.dim;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.n_times() - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn from_parts(kind: FlowKind, dim: usize, n_particles: usize, values: Vec<f64>) -> Result<Self> {
        finish(values, dim, n_particles, kind)
    }

    /// `mean_i |value^i_k|^2` for every grid time `k`.
    pub fn mean_square_norms(&self) -> Vec<f64> {
        (0..self.n_times()).map(|k| mean_square(self.at(k), self.dim)).collect()
    }
}

pub(crate) fn mean_square(values: &[f64], dim: usize) -> f64 {
    let sq: Vec<f64> = values.chunks_exact(dim).map(|r| r.iter().map(|x| x * x).sum()).collect();
    stats::mean(&sq)
}

/// Time derivative of a Cameron-Martin direction on the grid, `n_steps x N x q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionDerivative {
    pub values: Vec<f64>,
    /// Whether `h'_k` only uses information available at `t_k`.
    pub adapted: bool,
}

impl DirectionDerivative {
    pub fn adapted(values: Vec<f64>) -> Self {
        Self { values, adapted: true }
    }

    /// Same deterministic `h'(t_k)` for every particle.
    pub fn deterministic(traj: &TrajectoryBundle, h_prime: impl Fn(f64) -> Vec<f64>) -> Self {
        let grid = traj.grid();
        let mut values = Vec::with_capacity(grid.n_steps() * traj.n_particles() * traj.noise_dim());
        for k in 0..grid.n_steps() {
            let h = h_prime(grid.time(k));
            for _ in 0..traj.n_particles() {
                values.extend_from_slice(&h);
            }
        }
        Self { values, adapted: true }
    }
}

/// One step of the initial-direction flow. `field` is the peer average of
/// the Lions kernel applied to `v` (see
/// [`CoefficientModel::lions_drift_field`]); `sigma_field`, when present, is
/// the matching `d x q` term for a measure-dependent diffusion.
#[allow(clippy::too_many_arguments)]
pub(crate) fn v_step(
    model: &dyn CoefficientModel,
    t: f64,
    dt: f64,
    x: &[f64],
    mu: &EmpiricalMeasure<'_>,
    v: &[f64],
    field: &[f64],
    sigma_field: Option<&[f64]>,
    dw: &[f64],
    out: &mut [f64],
) {
    let d = model.dim();
    let q = model.noise_dim();
    let state_free = model.diffusion_is_state_free();
    out.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, chunk)| {
        let mut grad = vec![0.0; d * d];
        let mut sgrad = vec![0.0; d * d * q];
        let mut gv = vec![0.0; d];
        for (r, row) in chunk.chunks_exact_mut(d).enumerate() {
            let i = c * CHUNK + r;
            let xi = &x[i * d..(i + 1) * d];
            let vi = &v[i * d..(i + 1) * d];
            let zi = &dw[i * q..(i + 1) * q];
            model.drift_grad(t, xi, mu, &mut grad);
            linalg::mat_vec(&grad, d, d, vi, &mut gv);
            for a in 0..d {
                row[a] = vi[a] + dt * (gv[a] + field[i * d + a]);
            }
            if !state_free {
                model.diffusion_grad(t, xi, &mut sgrad);
                add_directional_noise(&sgrad, vi, zi, d, q, row);
            }
            if let Some(sf) = sigma_field {
                linalg::mat_vec_add(&sf[i * d * q..(i + 1) * d * q], d, q, zi, row);
            }
        }
    });
}

/// `row += (sum_k dir_k d sigma / d x_k) dw`.
fn add_directional_noise(sgrad: &[f64], dir: &[f64], dw: &[f64], d: usize, q: usize, row: &mut [f64]) {
    for (k, dk) in dir.iter().enumerate() {
        if *dk == 0.0 {
            continue;
        }
        let slice = &sgrad[k * d * q..(k + 1) * d * q];
        for a in 0..d {
            let s: f64 = slice[a * q..(a + 1) * q].iter().zip(dw).map(|(p, w)| p * w).sum();
            row[a] += dk * s;
        }
    }
}

/// Lions terms of the initial-direction flow at one step.
pub(crate) fn lions_terms(
    model: &dyn CoefficientModel,
    t: f64,
    mu: &EmpiricalMeasure<'_>,
    v: &[f64],
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut field = vec![0.0; v.len()];
    model.lions_drift_field(t, mu, v, &mut field);
    let mut sigma_field = vec![0.0; v.len() * model.noise_dim()];
    let has_sigma = model.diffusion_lions_field(t, mu, v, &mut sigma_field);
    (field, has_sigma.then_some(sigma_field))
}

/// One step of the Malliavin flow: `w + (grad b w + sigma h') dt + (grad_w sigma) dW`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn w_step(
    model: &dyn CoefficientModel,
    t: f64,
    dt: f64,
    x: &[f64],
    mu: &EmpiricalMeasure<'_>,
    w: &[f64],
    h_prime: &[f64],
    dw: &[f64],
    out: &mut [f64],
) {
    let d = model.dim();
    let q = model.noise_dim();
    let state_free = model.diffusion_is_state_free();
    out.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, chunk)| {
        let mut grad = vec![0.0; d * d];
        let mut sig = vec![0.0; d * q];
        let mut sgrad = vec![0.0; d * d * q];
        let mut drift = vec![0.0; d];
        for (r, row) in chunk.chunks_exact_mut(d).enumerate() {
            let i = c * CHUNK + r;
            let xi = &x[i * d..(i + 1) * d];
            let wi = &w[i * d..(i + 1) * d];
            let hi = &h_prime[i * q..(i + 1) * q];
            model.drift_grad(t, xi, mu, &mut grad);
            model.diffusion(t, xi, &mut sig);
            linalg::mat_vec(&grad, d, d, wi, &mut drift);
            linalg::mat_vec_add(&sig, d, q, hi, &mut drift);
            for a in 0..d {
                row[a] = wi[a] + dt * drift[a];
            }
            if !state_free {
                model.diffusion_grad(t, xi, &mut sgrad);
                add_directional_noise(&sgrad, wi, &dw[i * q..(i + 1) * q], d, q, row);
            }
        }
    });
}

/// Flow of the derivative along `phi(X_0)`, driven by the increments of `traj`.
pub fn propagate_v(
    traj: &TrajectoryBundle,
    phi: &dyn VectorField,
    model: &dyn CoefficientModel,
) -> Result<VariationalPath> {
    traj.check_model(model)?;
    let d = traj.dim();
    let grid = traj.grid();
    let width = traj.n_particles() * d;
    let mut values = Vec::with_capacity((grid.n_steps() + 1) * width);
    values.extend(eval_field(phi, traj.states_at(0), d)?);
    let mut next = vec![0.0; width];
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let x = traj.states_at(k);
        let mu = EmpiricalMeasure::new(d, x);
        let v = &values[k * width..(k + 1) * width];
        let (field, sigma_field) = lions_terms(model, t, &mu, v);
        v_step(model, t, grid.dt(), x, &mu, v, &field, sigma_field.as_deref(), traj.increments_at(k), &mut next);
        values.extend_from_slice(&next);
    }
    finish(values, d, traj.n_particles(), FlowKind::InitialDirection)
}

fn finish(values: Vec<f64>, dim: usize, n: usize, kind: FlowKind) -> Result<VariationalPath> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("derivative flow"));
    }
    Ok(VariationalPath {
        kind,
        dim,
        n_particles: n,
        values,
    })
}

fn check_direction(traj: &TrajectoryBundle, h: &DirectionDerivative, model: &dyn CoefficientModel) -> Result<()> {
    traj.check_model(model)?;
    let expected = traj.grid().n_steps() * traj.n_particles() * traj.noise_dim();
    if h.values.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "direction derivative",
            expected,
            found: h.values.len(),
        });
    }
    if !h.adapted && !model.diffusion_is_state_free() {
        return Err(Error::AnticipativeDirection);
    }
    Ok(())
}

/// Malliavin derivative of the paths along `h` (`h'` given on the grid).
pub fn propagate_w(
    traj: &TrajectoryBundle,
    h: &DirectionDerivative,
    model: &dyn CoefficientModel,
) -> Result<VariationalPath> {
    check_direction(traj, h, model)?;
    let d = traj.dim();
    let q = traj.noise_dim();
    let grid = traj.grid();
    let n = traj.n_particles();
    let width = n * d;
    let mut values = vec![0.0; width];
    let mut next = vec![0.0; width];
    for k in 0..grid.n_steps() {
        let x = traj.states_at(k);
        let mu = EmpiricalMeasure::new(d, x);
        let w = &values[k * width..(k + 1) * width];
        let hk = &h.values[k * n * q..(k + 1) * n * q];
        w_step(model, grid.time(k), grid.dt(), x, &mu, w, hk, traj.increments_at(k), &mut next);
        values.extend_from_slice(&next);
    }
    finish(values, d, n, FlowKind::MalliavinDirection)
}

/// Re-simulates with increments `dW + eps h' dt`, keeping the measure of the
/// base trajectory in the drift, and returns
/// `max_k mean_i |(X^shift - X) / eps - w_k|`.
pub fn malliavin_shift_check(
    traj: &TrajectoryBundle,
    h: &DirectionDerivative,
    eps: f64,
    model: &dyn CoefficientModel,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(crate::error::invalid("shift size must be positive"));
    }
    let w = propagate_w(traj, h, model)?;
    let d = traj.dim();
    let q = traj.noise_dim();
    let n = traj.n_particles();
    let grid = traj.grid();
    let dt = grid.dt();
    let mut x = traj.states_at(0).to_vec();
    let mut next = vec![0.0; x.len()];
    let mut worst = 0.0f64;
    for k in 0..grid.n_steps() {
        let base = traj.states_at(k);
        let mu = EmpiricalMeasure::new(d, base);
        let hk = &h.values[k * n * q..(k + 1) * n * q];
        let dw: Vec<f64> = traj.increments_at(k).iter().zip(hk).map(|(z, hp)| z + eps * hp * dt).collect();
        advance(model, grid.time(k), dt, &x, &mu, &dw, &mut next)?;
        std::mem::swap(&mut x, &mut next);
        let target = traj.states_at(k + 1);
        let wk = w.at(k + 1);
        let gaps: Vec<f64> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|a| {
                        let j = i * d + a;
                        let g = (x[j] - target[j]) / eps - wk[j];
                        g * g
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        worst = worst.max(stats::mean(&gaps));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{ConstantField, FnField};
    use crate::grid::TimeGrid;
    use crate::initial::GaussianLaw;
    use crate::models::{LocalModel, MeanFieldOu, TanhInteraction};
    use crate::sim::{clone_shifted, simulate};

    fn ou(a: f64) -> impl CoefficientModel {
        LocalModel {
            dim: 1,
            drift: move |_t: f64, x: &[f64], o: &mut [f64]| o[0] = a * x[0],
            drift_grad: move |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = a,
            sigma: 1.0,
            k: a.abs(),
        }
    }

    #[test]
    fn zero_direction_gives_zero_flow() {
        let m = MeanFieldOu::default();
        let traj = simulate(&m, &GaussianLaw::standard(1), TimeGrid::new(1.0, 20).unwrap(), 30, 1).unwrap();
        let v = propagate_v(&traj, &ConstantField(vec![0.0]), &m).unwrap();
        assert!(v.values().iter().all(|x| *x == 0.0));
        let h = DirectionDerivative::deterministic(&traj, |_| vec![0.0]);
        let w = propagate_w(&traj, &h, &m).unwrap();
        assert!(w.values().iter().all(|x| *x == 0.0));
        assert_eq!(malliavin_shift_check(&traj, &h, 1e-2, &m).unwrap(), 0.0);
    }

    #[test]
    fn mean_field_ou_flow_is_deterministic_exponential() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 100, 2).unwrap();
        let v = propagate_v(&traj, &ConstantField(vec![1.0]), &m).unwrap();
        let discrete = (1.0 - 0.5 * grid.dt()).powi(200);
        for x in v.terminal() {
            assert!((x - discrete).abs() < 1e-12);
        }
        assert!((discrete - (-0.5f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn local_linear_flow_scales_the_direction() {
        let m = ou(-1.0);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 20, 3).unwrap();
        let phi = FnField::new(1, |x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0]);
        let v = propagate_v(&traj, &phi, &m).unwrap();
        let factor = (1.0 - grid.dt()).powi(100);
        for (vt, x0) in v.terminal().iter().zip(traj.states_at(0)) {
            assert!((vt - factor * x0 * x0).abs() < 1e-12);
        }
    }

    #[test]
    fn malliavin_flow_closed_forms() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let free = ou(0.0);
        let traj = simulate(&free, &GaussianLaw::standard(1), grid, 5, 4).unwrap();
        let h = DirectionDerivative::deterministic(&traj, |_| vec![1.0]);
        let w = propagate_w(&traj, &h, &free).unwrap();
        for x in w.terminal() {
            assert!((x - 1.0).abs() < 1e-12);
        }
        assert!(malliavin_shift_check(&traj, &h, 0.3, &free).unwrap() < 1e-12);

        let a = -1.0;
        let m = ou(a);
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 5, 4).unwrap();
        let w = propagate_w(&traj, &h, &m).unwrap();
        let exact = ((a * 1.0f64).exp() - 1.0) / a;
        for x in w.terminal() {
            assert!((x - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn finite_differences_approach_the_flow() {
        let m = TanhInteraction::default();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 40, 5).unwrap();
        let phi = FnField::new(1, |x: &[f64], o: &mut [f64]| o[0] = 1.0 + 0.5 * x[0].sin());
        let v = propagate_v(&traj, &phi, &m).unwrap();
        let gap = |eps: f64| {
            let s = clone_shifted(&traj, &phi, eps, &m).unwrap();
            let fd: Vec<f64> = s
                .terminal()
                .states()
                .iter()
                .zip(traj.terminal().states())
                .zip(v.terminal())
                .map(|((a, b), vt)| ((a - b) / eps - vt).abs())
                .collect();
            fd.iter().cloned().fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(1e-2), gap(1e-3));
        assert!(g1 < 1e-2 && g2 < 1e-3);
        assert!((g1 / g2 - 10.0).abs() < 2.0, "{g1} {g2}");
    }

    #[test]
    fn anticipative_direction_needs_state_free_diffusion() {
        struct Multiplicative;
        impl CoefficientModel for Multiplicative {
            fn dim(&self) -> usize {
                1
            }
            fn name(&self) -> &str {
                "multiplicative"
            }
            fn drift(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn drift_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn drift_lions(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, _z: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
                out[0] = 1.0 + 0.1 * x[0].sin();
            }
            fn diffusion_grad(&self, _t: f64, x: &[f64], out: &mut [f64]) {
                out[0] = 0.1 * x[0].cos();
            }
            fn bound_k(&self, _t: f64) -> f64 {
                0.1
            }
            fn bound_lambda(&self, _t: f64) -> f64 {
                1.0 / 0.9
            }
        }
        let m = Multiplicative;
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 10, 6).unwrap();
        let mut h = DirectionDerivative::deterministic(&traj, |_| vec![1.0]);
        h.adapted = false;
        let err = propagate_w(&traj, &h, &m).unwrap_err();
        assert_eq!(err.to_string(), "anticipative direction requires constant diffusion");
        h.adapted = true;
        let e1 = malliavin_shift_check(&traj, &h, 1e-2, &m).unwrap();
        let e2 = malliavin_shift_check(&traj, &h, 1e-3, &m).unwrap();
        assert!((e1 / e2 - 10.0).abs() < 2.0, "{e1} {e2}");
    }
}
