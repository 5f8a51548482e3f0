//! Degenerate (stochastic Hamiltonian) systems on `R^{m + d}`:
//!
//! ```text
//! dX1 = b1(t, X) dt                      (positions, m coordinates)
//! dX2 = b2(t, X, law(X)) dt + sigma_t dW (velocities, d coordinates)
//! ```
//!
//! Noise only reaches the positions through `b1`, so the derivative in the
//! initial condition is transported to a Malliavin derivative by a control
//! `alpha` with `alpha_0 = phi(X_0)` and `alpha_T = 0`. The estimator is
//! `E[f(X_T) D*(h)]` where `D*(h) = int <h', dW>` is an Ito integral as long
//! as `h` is adapted, which holds when `b1` is linear (the control then only
//! depends on deterministic matrices).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bismut::WeightedRun;
use crate::error::{invalid, Error, Result};
use crate::estimate::{EstimatorResult, Method, RunMetadata};
use crate::flow::{w_step, DirectionDerivative, VariationalPath};
use crate::functions::{eval_field, TestFunction, VectorField};
use crate::grid::TimeGrid;
use crate::initial::InitialLaw;
use crate::linalg::{self, identity, mat_mul, mat_vec, transpose};
use crate::measure::EmpiricalMeasure;
use crate::model::CoefficientModel;
use crate::sim::{ParticleSystem, TrajectoryBundle};
use crate::stats::CHUNK;

pub trait HamiltonianModel: CoefficientModel {
    /// Number of position coordinates `m`; the remaining `dim() - m` are velocities.
    fn position_dim(&self) -> usize;

    fn velocity_dim(&self) -> usize {
        self.dim() - self.position_dim()
    }

    /// Deterministic velocity diffusion `sigma_t` (`d x d`).
    fn sigma(&self, t: f64, out: &mut [f64]);

    fn sigma_inv(&self, t: f64, out: &mut [f64]) -> bool {
        let d = self.velocity_dim();
        let mut s = vec![0.0; d * d];
        self.sigma(t, &mut s);
        match linalg::invert(&s, d) {
            Some(inv) => {
                out.copy_from_slice(&inv);
                true
            }
            None => false,
        }
    }

    /// Control matrix `B_t` (`m x d`).
    fn control_matrix(&self, t: f64, out: &mut [f64]);

    /// Slack `eps` in `<(grad_2 b1 - B) B^* a, a> >= -eps |B^* a|^2`.
    fn epsilon(&self) -> f64 {
        0.0
    }

    /// Declared bound on the Hessian of `b1`.
    fn position_hessian_bound(&self) -> f64;

    /// `true` when `b1` is affine in the state, which makes the control
    /// deterministic and the divergence an Ito integral.
    fn linear_position_drift(&self) -> bool;

    /// Lower bound `theta_t` of the controllability Gramian, if known in
    /// closed form. Otherwise the smallest eigenvalue of the computed
    /// Gramian is used.
    fn theta(&self, _t: f64, _horizon: f64) -> Option<f64> {
        None
    }
}

/// Rank of `[B, AB, ..., A^k B]` (`A` is `m x m`, `B` is `m x d`), with
/// tolerance `1e-10` times the largest singular value, and whether it is full.
pub fn kalman_rank(a: &[f64], b: &[f64], m: usize, d: usize, k_max: usize) -> (usize, bool) {
    if m == 0 {
        return (0, true);
    }
    let mut blocks = vec![b.to_vec()];
    for _ in 0..k_max {
        let last = blocks.last().unwrap();
        blocks.push(mat_mul(a, last, m, m, d));
    }
    let cols = d * blocks.len();
    let mut stacked = vec![0.0; m * cols];
    for (j, blk) in blocks.iter().enumerate() {
        for r in 0..m {
            stacked[r * cols + j * d..r * cols + (j + 1) * d].copy_from_slice(&blk[r * d..(r + 1) * d]);
        }
    }
    let rank = linalg::rank(&stacked, m, cols, 1e-10);
    (rank, rank == m)
}

/// `(grad_1 b1, grad_2 b1)` at `(t, x)`: `m x m` and `m x d`.
fn position_gradients(model: &dyn HamiltonianModel, t: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = model.dim();
    let m = model.position_dim();
    let d = p - m;
    let mut grad = vec![0.0; p * p];
    model.drift_grad(t, x, &EmpiricalMeasure::new(p, x), &mut grad);
    let mut a = vec![0.0; m * m];
    let mut g2 = vec![0.0; m * d];
    for r in 0..m {
        a[r * m..(r + 1) * m].copy_from_slice(&grad[r * p..r * p + m]);
        g2[r * d..(r + 1) * d].copy_from_slice(&grad[r * p + m..(r + 1) * p]);
    }
    (a, g2)
}

/// Smallest value of `<(grad_2 b1 - B) B^* a, a> + eps |B^* a|^2` over
/// `n_samples` random unit directions `a` and states drawn from `states`
/// at random grid times; non-negative when the condition holds there.
pub fn check_condition_b(
    model: &dyn HamiltonianModel,
    states: &[f64],
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let p = model.dim();
    let m = model.position_dim();
    let d = p - m;
    if states.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n = states.len() / p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = vec![0.0; m * d];
    let mut worst = f64::INFINITY;
    for _ in 0..n_samples {
        let k = rng.random_range(0..=grid.n_steps());
        let i = rng.random_range(0..n);
        let t = grid.time(k);
        let (_, g2) = position_gradients(model, t, &states[i * p..(i + 1) * p]);
        model.control_matrix(t, &mut b);
        let mut a: Vec<f64> = (0..m).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let norm = linalg::dot(&a, &a).sqrt().max(f64::MIN_POSITIVE);
        a.iter_mut().for_each(|x| *x /= norm);
        let bt = transpose(&b, m, d);
        let mut bta = vec![0.0; d];
        mat_vec(&bt, d, m, &a, &mut bta);
        let diff: Vec<f64> = g2.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mut v = vec![0.0; m];
        mat_vec(&diff, m, d, &bta, &mut v);
        let margin = linalg::dot(&v, &a) + model.epsilon() * linalg::dot(&bta, &bta);
        worst = worst.min(margin);
    }
    Ok(worst)
}

/// `K_{t_j, t_s}` for `j = s..=n` along one path (`(n + 1) x (m + d)` states),
/// by explicit Euler on `d/dt K = grad_1 b1 K`.
pub fn propagate_k_path(model: &dyn HamiltonianModel, path: &[f64], grid: &TimeGrid, s_index: usize) -> Result<Vec<Vec<f64>>> {
    let p = model.dim();
    let m = model.position_dim();
    if s_index > grid.n_steps() {
        return Err(invalid("start index beyond the grid"));
    }
    let mut out = vec![identity(m)];
    for j in s_index..grid.n_steps() {
        let (a, _) = position_gradients(model, grid.time(j), &path[j * p..(j + 1) * p]);
        let k = out.last().unwrap();
        let ak = mat_mul(&a, k, m, m, m);
        let next: Vec<f64> = k.iter().zip(&ak).map(|(x, y)| x + grid.dt() * y).collect();
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("K flow"));
        }
        out.push(next);
    }
    Ok(out)
}

/// Path of particle `i` as `(n + 1) x (m + d)` states.
fn particle_path(traj: &TrajectoryBundle, i: usize) -> Vec<f64> {
    let p = traj.dim();
    (0..=traj.grid().n_steps())
        .flat_map(|k| traj.states_at(k)[i * p..(i + 1) * p].to_vec())
        .collect()
}

/// [`propagate_k_path`] for every particle of a stored trajectory.
pub fn propagate_k(traj: &TrajectoryBundle, s_index: usize, model: &dyn HamiltonianModel) -> Result<Vec<Vec<Vec<f64>>>> {
    traj.check_model(model)?;
    (0..traj.n_particles())
        .into_par_iter()
        .map(|i| propagate_k_path(model, &particle_path(traj, i), &traj.grid(), s_index))
        .collect()
}

/// Gramian-type matrices along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct Gramians {
    pub m: usize,
    /// `K_{T, t_k}` (backward products of the Euler factors, so the discrete
    /// flow property holds exactly).
    pub k_terminal: Vec<Vec<f64>>,
    /// `Q_{t_k} = int_0^{t_k} s (T - s) K_{T,s} grad_2 b1 B^* K_{T,s}^* ds`.
    pub q: Vec<Vec<f64>>,
    /// `int_0^{t_k} s (T - s) K_{T,s} B B^* K_{T,s}^* ds`.
    pub gram: Vec<Vec<f64>>,
    /// `theta_{t_k}`.
    pub theta: Vec<f64>,
    /// `|Q_{t_k}^{-1}| (1 - eps) theta_{t_k}`, `None` where `theta = 0`.
    pub q_ratio: Vec<Option<f64>>,
    /// Grid indices where the ratio exceeds `1 + 10 dt`.
    pub violations: Vec<usize>,
}

impl Gramians {
    pub fn max_ratio(&self) -> f64 {
        self.q_ratio.iter().flatten().copied().fold(0.0, f64::max)
    }
}

struct PathMatrices {
    a: Vec<Vec<f64>>,
    g2: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

fn path_matrices(model: &dyn HamiltonianModel, path: &[f64], grid: &TimeGrid) -> PathMatrices {
    let p = model.dim();
    let m = model.position_dim();
    let d = p - m;
    let mut out = PathMatrices {
        a: Vec::new(),
        g2: Vec::new(),
        b: Vec::new(),
    };
    for k in 0..=grid.n_steps() {
        let t = grid.time(k);
        let (a, g2) = position_gradients(model, t, &path[k * p..(k + 1) * p]);
        let mut b = vec![0.0; m * d];
        model.control_matrix(t, &mut b);
        out.a.push(a);
        out.g2.push(g2);
        out.b.push(b);
    }
    out
}

fn add_scaled(acc: &mut [f64], x: &[f64], s: f64) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += s * b);
}

fn cumulative_matrix_trapezoid(values: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; values[0].len()]];
    for k in 1..values.len() {
        let mut next = out[k - 1].clone();
        add_scaled(&mut next, &values[k - 1], 0.5 * dt);
        add_scaled(&mut next, &values[k], 0.5 * dt);
        out.push(next);
    }
    out
}

fn gramians_from(model: &dyn HamiltonianModel, mats: &PathMatrices, grid: &TimeGrid) -> Result<Gramians> {
    let p = model.dim();
    let m = model.position_dim();
    let d = p - m;
    let n = grid.n_steps();
    let horizon = grid.horizon();
    let dt = grid.dt();
    let mut k_terminal = vec![identity(m); n + 1];
    for k in (0..n).rev() {
        let mut step = identity(m);
        add_scaled(&mut step, &mats.a[k], dt);
        k_terminal[k] = mat_mul(&k_terminal[k + 1], &step, m, m, m);
    }
    let mut jq = Vec::with_capacity(n + 1);
    let mut jg = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = grid.time(k);
        let w = t * (horizon - t);
        let kt = &k_terminal[k];
        let ktt = transpose(kt, m, m);
        let bt = transpose(&mats.b[k], m, d);
        let left_q = mat_mul(&mat_mul(kt, &mats.g2[k], m, m, d), &bt, m, d, m);
        let left_g = mat_mul(&mat_mul(kt, &mats.b[k], m, m, d), &bt, m, d, m);
        jq.push(mat_mul(&left_q, &ktt, m, m, m).iter().map(|x| w * x).collect::<Vec<_>>());
        jg.push(mat_mul(&left_g, &ktt, m, m, m).iter().map(|x| w * x).collect::<Vec<_>>());
    }
    let q = cumulative_matrix_trapezoid(&jq, dt);
    let gram = cumulative_matrix_trapezoid(&jg, dt);
    let theta: Vec<f64> = (0..=n)
        .map(|k| {
            if k == 0 {
                return 0.0;
            }
            model
                .theta(grid.time(k), horizon)
                .unwrap_or_else(|| gramian_floor(&gram[k], m))
                .max(0.0)
        })
        .collect();
    let cond = linalg::condition_number(&q[n], m);
    if !(cond <= 1e12) {
        return Err(Error::Controllability(format!(
            "Q_T is numerically singular (condition number {cond:.3e})"
        )));
    }
    let eps = model.epsilon();
    let mut q_ratio = vec![None; n + 1];
    let mut violations = Vec::new();
    for k in 1..=n {
        if theta[k] <= 0.0 {
            continue;
        }
        let inv = linalg::invert(&q[k], m).ok_or_else(|| {
            Error::Controllability(format!("Q singular at t = {} although theta > 0", grid.time(k)))
        })?;
        let r = linalg::op_norm(&inv, m, m) * (1.0 - eps) * theta[k];
        if r > 1.0 + 10.0 * dt {
            violations.push(k);
        }
        q_ratio[k] = Some(r);
    }
    Ok(Gramians {
        m,
        k_terminal,
        q,
        gram,
        theta,
        q_ratio,
        violations,
    })
}

/// Smallest eigenvalue of a Gramian, with values at rounding level (relative
/// to the largest singular value) reported as zero.
fn gramian_floor(gram: &[f64], m: usize) -> f64 {
    let lo = linalg::min_sym_eigenvalue(gram, m);
    let hi = linalg::op_norm(gram, m, m);
    if lo <= 1e-10 * hi {
        0.0
    } else {
        lo
    }
}

/// `K_{T,t}`, `Q_t`, the Gramian and `theta_t` along one path, with the
/// inequality `|Q_t^{-1}| <= 1 / ((1 - eps) theta_t)` checked at every grid
/// time (slack `1 + 10 dt`).
pub fn compute_gramians(model: &dyn HamiltonianModel, path: &[f64], grid: &TimeGrid) -> Result<Gramians> {
    if model.position_dim() == 0 {
        return Err(invalid("no position block"));
    }
    gramians_from(model, &path_matrices(model, path, grid), grid)
}

/// [`compute_gramians`] for every particle of a stored trajectory.
pub fn compute_q(traj: &TrajectoryBundle, model: &dyn HamiltonianModel) -> Result<Vec<Gramians>> {
    traj.check_model(model)?;
    (0..traj.n_particles())
        .into_par_iter()
        .map(|i| compute_gramians(model, &particle_path(traj, i), &traj.grid()))
        .collect()
}

/// How the control is discretised on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Continuous-time control sampled on the grid, with its analytic time
    /// derivative; `alpha^{(1)}_T = 0` holds up to `O(dt)`.
    Continuous,
    /// Adds a correction proportional to `t (T - t) B^* K_{T,t}^*` so that the
    /// Euler recursion for `alpha^{(1)}` ends exactly at zero, and uses forward
    /// differences of `alpha^{(2)}`. The Euler flows then satisfy
    /// `v_T = w_T` exactly.
    #[default]
    GridExact,
}

/// Linear maps `phi(X_0) -> alpha_{t_k}` and `phi(X_0) -> (alpha^{(2)})'_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    dim: usize,
    velocity_dim: usize,
    /// `(n + 1)` matrices of size `(m + d) x (m + d)`.
    alpha: Vec<Vec<f64>>,
    /// `n` matrices of size `d x (m + d)`.
    d_alpha2: Vec<Vec<f64>>,
    pub theta_terminal: f64,
    pub theta_integral: f64,
    pub q_terminal: Vec<f64>,
    pub violations: Vec<usize>,
    pub max_q_ratio: f64,
}

impl ControlPlan {
    pub fn n_steps(&self) -> usize {
        self.d_alpha2.len()
    }

    pub fn alpha(&self, k: usize, phi: &[f64], out: &mut [f64]) {
        mat_vec(&self.alpha[k], self.dim, self.dim, phi, out);
    }

    pub fn d_alpha2(&self, k: usize, phi: &[f64], out: &mut [f64]) {
        mat_vec(&self.d_alpha2[k], self.velocity_dim, self.dim, phi, out);
    }
}

/// Builds the control along one path for every basis direction.
pub fn control_plan(
    model: &dyn HamiltonianModel,
    path: &[f64],
    grid: &TimeGrid,
    disc: Discretization,
) -> Result<ControlPlan> {
    let p = model.dim();
    let m = model.position_dim();
    let d = p - m;
    let n = grid.n_steps();
    let horizon = grid.horizon();
    let dt = grid.dt();
    let mut alpha = vec![vec![0.0; p * p]; n + 1];
    let mut d_alpha2 = vec![vec![0.0; d * p]; n];
    if m == 0 {
        for k in 0..=n {
            let s = (horizon - grid.time(k)) / horizon;
            alpha[k] = identity(p).iter().map(|x| s * x).collect();
        }
        for da in d_alpha2.iter_mut() {
            *da = identity(p).iter().map(|x| -x / horizon).collect();
        }
        return Ok(ControlPlan {
            dim: p,
            velocity_dim: d,
            alpha,
            d_alpha2,
            theta_terminal: f64::NAN,
            theta_integral: f64::NAN,
            q_terminal: Vec::new(),
            violations: Vec::new(),
            max_q_ratio: 0.0,
        });
    }
    let mats = path_matrices(model, path, grid);
    let gr = gramians_from(model, &mats, grid)?;
    let theta_integral = grid.trapezoid(&gr.theta.iter().map(|x| x * x).collect::<Vec<_>>());
    if !(theta_integral > 0.0) {
        return Err(Error::Controllability("theta vanishes on the grid".into()));
    }
    // theta^2 Q^{-1}, set to zero where theta = 0 (in particular at t = 0).
    let integrand: Vec<Vec<f64>> = (0..=n)
        .map(|k| {
            if gr.theta[k] <= 0.0 {
                return vec![0.0; m * m];
            }
            let inv = linalg::invert(&gr.q[k], m).expect("checked while building the Gramians");
            inv.iter().map(|x| gr.theta[k] * gr.theta[k] * x).collect()
        })
        .collect();
    let mut tail = vec![vec![0.0; m * m]; n + 1];
    for k in (0..n).rev() {
        let mut next = tail[k + 1].clone();
        add_scaled(&mut next, &integrand[k], 0.5 * dt);
        add_scaled(&mut next, &integrand[k + 1], 0.5 * dt);
        tail[k] = next;
    }
    let q_inv_t = linalg::invert(&gr.q[n], m).ok_or_else(|| Error::Controllability("Q_T is singular".into()))?;
    let weighted: Vec<Vec<f64>> = (0..=n)
        .map(|k| {
            let s = (horizon - grid.time(k)) / horizon;
            mat_mul(&gr.k_terminal[k], &mats.g2[k], m, m, d).iter().map(|x| s * x).collect()
        })
        .collect();
    let mut integral = vec![0.0; m * d];
    for k in 0..=n {
        let w = if k == 0 || k == n { 0.5 * dt } else { dt };
        add_scaled(&mut integral, &weighted[k], w);
    }
    let c2 = mat_mul(&q_inv_t, &integral, m, m, d);
    let g: Vec<Vec<f64>> = (0..=n)
        .map(|k| {
            let t = grid.time(k);
            let bt = transpose(&mats.b[k], m, d);
            let ktt = transpose(&gr.k_terminal[k], m, m);
            mat_mul(&bt, &ktt, d, m, m).iter().map(|x| t * (horizon - t) * x).collect()
        })
        .collect();
    let k_t0 = &gr.k_terminal[0];

    let euler_alpha1 = |phi1: &[f64], a2: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut a1 = vec![phi1.to_vec()];
        for k in 0..n {
            let prev = &a1[k];
            let mut drift = vec![0.0; m];
            mat_vec(&mats.a[k], m, m, prev, &mut drift);
            linalg::mat_vec_add(&mats.g2[k], m, d, &a2[k], &mut drift);
            a1.push(prev.iter().zip(&drift).map(|(x, y)| x + dt * y).collect());
        }
        a1
    };

    // Discrete counterpart of Q_T used by the terminal correction.
    let correction_inv = if disc == Discretization::GridExact {
        let mut qt = vec![0.0; m * m];
        for k in 0..n {
            let kg = mat_mul(&gr.k_terminal[k + 1], &mats.g2[k], m, m, d);
            add_scaled(&mut qt, &mat_mul(&kg, &g[k], m, d, m), dt);
        }
        Some(linalg::invert(&qt, m).ok_or_else(|| Error::Controllability("discrete Q_T is singular".into()))?)
    } else {
        None
    };

    for j in 0..p {
        let mut phi = vec![0.0; p];
        phi[j] = 1.0;
        let (phi1, phi2) = phi.split_at(m);
        let mut c1 = vec![0.0; m];
        mat_vec(k_t0, m, m, phi1, &mut c1);
        c1.iter_mut().for_each(|x| *x /= theta_integral);
        let mut c2v = vec![0.0; m];
        mat_vec(&c2, m, d, phi2, &mut c2v);
        // inner_k = I(t_k) c1 + c2 phi2
        let inner: Vec<Vec<f64>> = (0..=n)
            .map(|k| {
                let mut v = c2v.clone();
                linalg::mat_vec_add(&tail[k], m, m, &c1, &mut v);
                v
            })
            .collect();
        let mut a2: Vec<Vec<f64>> = (0..=n)
            .map(|k| {
                let s = (horizon - grid.time(k)) / horizon;
                let mut gv = vec![0.0; d];
                mat_vec(&g[k], d, m, &inner[k], &mut gv);
                phi2.iter().zip(&gv).map(|(x, y)| s * x - y).collect()
            })
            .collect();
        let mut a1 = euler_alpha1(phi1, &a2);
        let da2: Vec<Vec<f64>> = match &correction_inv {
            Some(inv) => {
                let mut corr = vec![0.0; m];
                mat_vec(inv, m, m, &a1[n], &mut corr);
                for k in 0..=n {
                    let mut gv = vec![0.0; d];
                    mat_vec(&g[k], d, m, &corr, &mut gv);
                    a2[k].iter_mut().zip(&gv).for_each(|(x, y)| *x -= y);
                }
                a2[n].fill(0.0);
                a1 = euler_alpha1(phi1, &a2);
                (0..n)
                    .map(|k| a2[k + 1].iter().zip(&a2[k]).map(|(x, y)| (x - y) / dt).collect())
                    .collect()
            }
            None => (0..n)
                .map(|k| {
                    let t = grid.time(k);
                    let bt = transpose(&mats.b[k], m, d);
                    let ktt = transpose(&gr.k_terminal[k], m, m);
                    let at = transpose(&mats.a[k], m, m);
                    let first = mat_mul(&bt, &ktt, d, m, m);
                    let second = mat_mul(&mat_mul(&bt, &at, d, m, m), &ktt, d, m, m);
                    let gprime: Vec<f64> = first
                        .iter()
                        .zip(&second)
                        .map(|(x, y)| (horizon - 2.0 * t) * x - t * (horizon - t) * y)
                        .collect();
                    let mut out: Vec<f64> = phi2.iter().map(|x| -x / horizon).collect();
                    let mut tmp = vec![0.0; d];
                    mat_vec(&gprime, d, m, &inner[k], &mut tmp);
                    out.iter_mut().zip(&tmp).for_each(|(o, x)| *o -= x);
                    let mut jc = vec![0.0; m];
                    mat_vec(&integrand[k], m, m, &c1, &mut jc);
                    mat_vec(&g[k], d, m, &jc, &mut tmp);
                    out.iter_mut().zip(&tmp).for_each(|(o, x)| *o += x);
                    out
                })
                .collect(),
        };
        for k in 0..=n {
            for r in 0..p {
                let value = if r < m { a1[k][r] } else { a2[k][r - m] };
                alpha[k][r * p + j] = value;
            }
        }
        for (k, v) in da2.iter().enumerate() {
            for r in 0..d {
                d_alpha2[k][r * p + j] = v[r];
            }
        }
    }
    Ok(ControlPlan {
        dim: p,
        velocity_dim: d,
        alpha,
        d_alpha2,
        theta_terminal: gr.theta[n],
        theta_integral,
        q_terminal: gr.q[n].clone(),
        violations: gr.violations.clone(),
        max_q_ratio: gr.max_ratio(),
    })
}

/// Control paths for every particle of a stored trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPaths {
    pub dim: usize,
    pub velocity_dim: usize,
    pub n_particles: usize,
    /// `(n + 1) x N x (m + d)`.
    pub alpha: Vec<f64>,
    /// `n x N x d`.
    pub d_alpha2: Vec<f64>,
    pub adapted: bool,
}

impl AlphaPaths {
    pub fn alpha_at(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.dim;
        &self.alpha[k * w..(k + 1) * w]
    }

    pub fn d_alpha2_at(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.velocity_dim;
        &self.d_alpha2[k * w..(k + 1) * w]
    }
}

fn check_hamiltonian(model: &dyn HamiltonianModel) -> Result<()> {
    if model.position_dim() > model.dim() || model.noise_dim() != model.velocity_dim() {
        return Err(invalid("Hamiltonian model needs noise on exactly the velocity block"));
    }
    Ok(())
}

/// Builds `alpha` for every particle. Each particle gets the plan of its
/// own path, except when `b1` is linear and one shared plan is exact.
pub fn build_alpha(
    traj: &TrajectoryBundle,
    phi: &dyn VectorField,
    model: &dyn HamiltonianModel,
    disc: Discretization,
) -> Result<AlphaPaths> {
    traj.check_model(model)?;
    check_hamiltonian(model)?;
    let p = model.dim();
    let d = model.velocity_dim();
    let n = traj.n_particles();
    let grid = traj.grid();
    let phis = eval_field(phi, traj.states_at(0), p)?;
    let shared = model.linear_position_drift();
    let plans: Vec<ControlPlan> = if shared {
        vec![control_plan(model, &particle_path(traj, 0), &grid, disc)?]
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| control_plan(model, &particle_path(traj, i), &grid, disc))
            .collect::<Result<_>>()?
    };
    let plan_of = |i: usize| if shared { &plans[0] } else { &plans[i] };
    let mut alpha = vec![0.0; (grid.n_steps() + 1) * n * p];
    let mut d_alpha2 = vec![0.0; grid.n_steps() * n * d];
    for k in 0..=grid.n_steps() {
        for i in 0..n {
            let phi_i = &phis[i * p..(i + 1) * p];
            let base = (k * n + i) * p;
            plan_of(i).alpha(k, phi_i, &mut alpha[base..base + p]);
            if k < grid.n_steps() {
                let base = (k * n + i) * d;
                plan_of(i).d_alpha2(k, phi_i, &mut d_alpha2[base..base + d]);
            }
        }
    }
    Ok(AlphaPaths {
        dim: p,
        velocity_dim: d,
        n_particles: n,
        alpha,
        d_alpha2,
        adapted: shared,
    })
}

/// `h'_k = sigma^{-1} [grad b2 . alpha_k - (alpha^{(2)})'_k + E<D^L b2, alpha_k + w_k>]`.
#[allow(clippy::too_many_arguments)]
fn h_step(
    model: &dyn HamiltonianModel,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure<'_>,
    alpha: &[f64],
    d_alpha2: &[f64],
    w: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let p = model.dim();
    let m = model.position_dim();
    let d = p - m;
    let mut s_inv = vec![0.0; d * d];
    if !model.sigma_inv(t, &mut s_inv) {
        return Err(Error::SingularDiffusion { time: t, particle: 0 });
    }
    let u: Vec<f64> = alpha.iter().zip(w).map(|(a, b)| a + b).collect();
    let mut field = vec![0.0; u.len()];
    model.lions_drift_field(t, mu, &u, &mut field);
    out.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, chunk)| {
        let mut grad = vec![0.0; p * p];
        let mut r = vec![0.0; d];
        for (j, row) in chunk.chunks_exact_mut(d).enumerate() {
            let i = c * CHUNK + j;
            model.drift_grad(t, &x[i * p..(i + 1) * p], mu, &mut grad);
            mat_vec(&grad[m * p..], d, p, &alpha[i * p..(i + 1) * p], &mut r);
            for a in 0..d {
                r[a] += field[i * p + m + a] - d_alpha2[i * d + a];
            }
            mat_vec(&s_inv, d, d, &r, row);
        }
    });
    Ok(())
}

/// Solves the `(h', w)` system along a stored trajectory (forward Euler,
/// left-point evaluation).
pub fn solve_h_w(
    traj: &TrajectoryBundle,
    alpha: &AlphaPaths,
    model: &dyn HamiltonianModel,
) -> Result<(DirectionDerivative, VariationalPath)> {
    traj.check_model(model)?;
    check_hamiltonian(model)?;
    let p = model.dim();
    let d = model.velocity_dim();
    let n = traj.n_particles();
    let grid = traj.grid();
    let mut h = vec![0.0; grid.n_steps() * n * d];
    let mut w_all = vec![0.0; n * p];
    let mut w = vec![0.0; n * p];
    let mut next = vec![0.0; n * p];
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let x = traj.states_at(k);
        let mu = EmpiricalMeasure::new(p, x);
        let hk = &mut h[k * n * d..(k + 1) * n * d];
        h_step(model, t, x, &mu, alpha.alpha_at(k), alpha.d_alpha2_at(k), &w, hk)?;
        w_step(model, t, grid.dt(), x, &mu, &w, hk, traj.increments_at(k), &mut next);
        std::mem::swap(&mut w, &mut next);
        w_all.extend_from_slice(&w);
    }
    let h = DirectionDerivative {
        values: h,
        adapted: alpha.adapted,
    };
    let path = VariationalPath::from_parts(crate::flow::FlowKind::MalliavinDirection, p, n, w_all)?;
    Ok((h, path))
}

/// `D*(h) = sum_k <h'_k, dW_k>` per particle; only for adapted `h`.
pub fn divergence_adapted(h: &DirectionDerivative, traj: &TrajectoryBundle) -> Result<Vec<f64>> {
    if !h.adapted {
        return Err(Error::AnticipativeDivergence);
    }
    crate::bismut::ito_weight(&h.values, traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateOptions {
    pub discretization: Discretization,
    pub centered: bool,
}

impl Default for DegenerateOptions {
    fn default() -> Self {
        Self {
            discretization: Discretization::GridExact,
            centered: true,
        }
    }
}

/// Streams particles, `(h', w)` and `D*(h)` in one pass.
#[allow(clippy::too_many_arguments)]
pub fn degenerate_run(
    model: &dyn HamiltonianModel,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
    disc: Discretization,
) -> Result<WeightedRun> {
    check_hamiltonian(model)?;
    if !model.linear_position_drift() {
        return Err(Error::AnticipativeDivergence);
    }
    let p = model.dim();
    let d = model.velocity_dim();
    let mut system = ParticleSystem::new(model, law, grid, n_particles, seed)?;
    // b1 is affine, so its gradients do not depend on the state and one
    // reference path (the first initial state, frozen) gives the exact plan.
    let x0 = system.states()[..p].to_vec();
    let reference: Vec<f64> = (0..=grid.n_steps()).flat_map(|_| x0.clone()).collect();
    let plan = control_plan(model, &reference, &grid, disc)?;
    let phis = eval_field(phi, system.states(), p)?;
    let mut alpha = vec![0.0; n_particles * p];
    let mut da2 = vec![0.0; n_particles * d];
    let mut h = vec![0.0; n_particles * d];
    let mut w = vec![0.0; n_particles * p];
    let mut next = vec![0.0; n_particles * p];
    let mut weights = vec![0.0; n_particles];
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        alpha
            .par_chunks_exact_mut(p)
            .zip(phis.par_chunks_exact(p))
            .for_each(|(a, ph)| plan.alpha(k, ph, a));
        da2.par_chunks_exact_mut(d)
            .zip(phis.par_chunks_exact(p))
            .for_each(|(a, ph)| plan.d_alpha2(k, ph, a));
        system.draw();
        {
            let x = system.states();
            let dw = system.increments();
            let mu = EmpiricalMeasure::new(p, x);
            h_step(model, t, x, &mu, &alpha, &da2, &w, &mut h)?;
            weights
                .par_iter_mut()
                .zip(h.par_chunks_exact(d).zip(dw.par_chunks_exact(d)))
                .for_each(|(wt, (hi, zi))| *wt += linalg::dot(hi, zi));
            w_step(model, t, grid.dt(), x, &mu, &w, &h, dw, &mut next);
        }
        std::mem::swap(&mut w, &mut next);
        system.advance()?;
    }
    if weights.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("divergence weights"));
    }
    let meta = RunMetadata::new(seed, grid, n_particles)
        .with_note("theta_T", plan.theta_terminal)
        .with_note("theta_integral", plan.theta_integral)
        .with_note("epsilon", model.epsilon())
        .with_note("q_violations", plan.violations.len())
        .with_note("discretization", format!("{disc:?}").to_lowercase());
    Ok(WeightedRun {
        dim: p,
        terminal: system.into_states(),
        weights,
        meta,
    })
}

/// Estimates `D^L_phi (P_T f)(mu)` as `E[f(X_T) D*(h)]` for a degenerate model.
#[allow(clippy::too_many_arguments)]
pub fn estimate_lions_derivative_degenerate(
    model: &dyn HamiltonianModel,
    f: &dyn TestFunction,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
    options: &DegenerateOptions,
) -> Result<EstimatorResult> {
    let run = degenerate_run(model, law, phi, grid, n_particles, seed, options.discretization)?;
    let mut r = run.estimate(f, options.centered, Method::Degenerate)?;
    r.meta = r.meta.with_note("centered", options.centered);
    Ok(r)
}

/// Shape factor `sqrt(T) (T^2 + theta_T) / int_0^T theta_s^2 ds` of the
/// degenerate gradient and total-variation bounds (the multiplicative
/// constant is not computed).
pub fn degenerate_bound_shape(grid: &TimeGrid, theta: &dyn Fn(f64) -> f64) -> Result<f64> {
    let sq: Vec<f64> = grid.points().map(|t| theta(t).powi(2)).collect();
    let integral = grid.trapezoid(&sq);
    if !(integral > 0.0) {
        return Err(invalid("theta must not vanish identically"));
    }
    let horizon = grid.horizon();
    Ok(horizon.sqrt() * (horizon * horizon + theta(horizon)) / integral)
}
