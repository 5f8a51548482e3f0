//! Independent estimators used to cross-check the weighted formulas.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::estimate::{EstimatorResult, Method, RunMetadata};
use crate::flow::{lions_terms, v_step};
use crate::functions::{eval_field, TestFunction, VectorField};
use crate::grid::TimeGrid;
use crate::initial::InitialLaw;
use crate::measure::EmpiricalMeasure;
use crate::model::CoefficientModel;
use crate::sim::{shifted_states, ParticleSystem};

/// Difference scheme of [`finite_diff_lions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    /// `(P f(mu_eps) - P f(mu)) / eps`; bias `O(eps)`.
    Forward,
    /// `(P f(mu_eps) - P f(mu_-eps)) / (2 eps)`; bias `O(eps^2)` and exactly
    /// odd in `phi`.
    Central,
}

/// Runs the base and shifted particle systems in lockstep on the same
/// increments and returns their terminal states.
fn lockstep(
    model: &dyn CoefficientModel,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    shifts: &[f64],
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = model.dim();
    let mut base = ParticleSystem::new(model, law, grid, n_particles, seed)?;
    let mut others = shifts
        .iter()
        .map(|eps| {
            let start = shifted_states(base.states(), d, phi, *eps)?;
            ParticleSystem::from_states(model, grid, start, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..grid.n_steps() {
        base.draw();
        for s in others.iter_mut() {
            s.advance_with(base.increments())?;
        }
        base.advance()?;
    }
    let mut out = vec![base.into_states()];
    out.extend(others.into_iter().map(ParticleSystem::into_states));
    Ok(out)
}

fn eval_all(f: &dyn TestFunction, states: &[f64], d: usize) -> Vec<f64> {
    states.par_chunks_exact(d).map(|x| f.eval(x)).collect()
}

/// Finite-difference estimate of `D^L_phi (P_T f)(mu)` with common random
/// numbers: the shifted system reuses the initial draws and every Brownian
/// increment of the base system. The standard error comes from the paired
/// per-particle differences.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_lions(
    model: &dyn CoefficientModel,
    f: &dyn TestFunction,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    eps: f64,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
    scheme: FdScheme,
) -> Result<EstimatorResult> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let d = model.dim();
    let samples: Vec<f64> = match scheme {
        FdScheme::Forward => {
            let ends = lockstep(model, law, phi, &[eps], grid, n_particles, seed)?;
            let (f0, f1) = (eval_all(f, &ends[0], d), eval_all(f, &ends[1], d));
            f1.iter().zip(&f0).map(|(a, b)| (a - b) / eps).collect()
        }
        FdScheme::Central => {
            let ends = lockstep(model, law, phi, &[eps, -eps], grid, n_particles, seed)?;
            let (fp, fm) = (eval_all(f, &ends[1], d), eval_all(f, &ends[2], d));
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        }
    };
    let meta = RunMetadata::new(seed, grid, n_particles)
        .with_note("epsilon", eps)
        .with_note("scheme", format!("{scheme:?}").to_lowercase());
    EstimatorResult::from_samples(&samples, Method::FiniteDifference, meta)
}

/// Forward differences at `eps` and `eps / 2` on the same seed.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_richardson(
    model: &dyn CoefficientModel,
    f: &dyn TestFunction,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    eps: f64,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<(EstimatorResult, EstimatorResult)> {
    let a = finite_diff_lions(model, f, law, phi, eps, grid, n_particles, seed, FdScheme::Forward)?;
    let b = finite_diff_lions(model, f, law, phi, eps / 2.0, grid, n_particles, seed, FdScheme::Forward)?;
    Ok((a, b))
}

/// Pathwise estimate `E<grad f(X_T), v_T>` for differentiable `f`.
pub fn pathwise_lions(
    model: &dyn CoefficientModel,
    f: &dyn TestFunction,
    law: &dyn InitialLaw,
    phi: &dyn VectorField,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    let d = model.dim();
    let mut probe = vec![0.0; d];
    let origin = vec![0.0; d];
    if !f.gradient(&origin, &mut probe) {
        return Err(Error::MissingGradient);
    }
    let mut system = ParticleSystem::new(model, law, grid, n_particles, seed)?;
    let mut v = eval_field(phi, system.states(), d)?;
    let mut next = vec![0.0; v.len()];
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        system.draw();
        {
            let x = system.states();
            let mu = EmpiricalMeasure::new(d, x);
            let (field, sigma_field) = lions_terms(model, t, &mu, &v);
            v_step(model, t, grid.dt(), x, &mu, &v, &field, sigma_field.as_deref(), system.increments(), &mut next);
        }
        std::mem::swap(&mut v, &mut next);
        system.advance()?;
    }
    let samples: Vec<f64> = system
        .states()
        .par_chunks_exact(d)
        .zip(v.par_chunks_exact(d))
        .map(|(x, vi)| {
            let mut g = vec![0.0; d];
            f.gradient(x, &mut g);
            crate::linalg::dot(&g, vi)
        })
        .collect();
    EstimatorResult::from_samples(&samples, Method::Pathwise, RunMetadata::new(seed, grid, n_particles))
}

/// Shared equal-width binning over the range of two samples.
fn shared_bins(a: &[f64], b: &[f64], n_bins: usize) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if n_bins < 2 {
        return Err(invalid("at least two bins are required"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in a.iter().chain(b) {
        if !x.is_finite() {
            return Err(Error::NonFinite("samples"));
        }
        lo = lo.min(*x);
        hi = hi.max(*x);
    }
    Ok((lo, hi))
}

fn bin_index(x: f64, lo: f64, hi: f64, n_bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * n_bins as f64) as usize).min(n_bins - 1)
}

fn histogram(xs: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_bins];
    for x in xs {
        counts[bin_index(*x, lo, hi, n_bins)] += 1;
    }
    counts.iter().map(|c| *c as f64 / xs.len() as f64).collect()
}

/// Default bin count `round(N^{1/3})`, at least 2.
pub fn default_bins(n: usize) -> usize {
    ((n as f64).cbrt().round() as usize).max(2)
}

/// Histogram estimate of the total-variation distance between two scalar
/// samples; coarsening can only lower it, so it estimates a lower bound.
pub fn empirical_tv(a: &[f64], b: &[f64], n_bins: usize) -> Result<f64> {
    Ok(empirical_tv_with_se(a, b, n_bins)?.0)
}

/// [`empirical_tv`] with a rough standard error
/// `0.5 sqrt(sum_bins p_a (1 - p_a) / N_a + p_b (1 - p_b) / N_b)`.
pub fn empirical_tv_with_se(a: &[f64], b: &[f64], n_bins: usize) -> Result<(f64, f64)> {
    let (lo, hi) = shared_bins(a, b, n_bins)?;
    let pa = histogram(a, lo, hi, n_bins);
    let pb = histogram(b, lo, hi, n_bins);
    let tv = 0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let var: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| x * (1.0 - x) / a.len() as f64 + y * (1.0 - y) / b.len() as f64)
        .sum();
    Ok((tv.min(1.0), 0.5 * var.sqrt()))
}

/// Piecewise-constant regression of the weights on the terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRegression {
    /// `n_bins + 1` bin edges.
    pub edges: Vec<f64>,
    /// Mean weight per bin; `None` for empty bins.
    pub psi: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    bin_of: Vec<usize>,
}

impl WeightRegression {
    pub fn n_samples(&self) -> usize {
        self.bin_of.len()
    }

    /// Fraction of samples per bin.
    pub fn masses(&self) -> Vec<f64> {
        let n = self.n_samples() as f64;
        self.counts.iter().map(|c| *c as f64 / n).collect()
    }

    /// `sum_bins psi_b * mass_b`; estimates `E[weight] = 0`.
    pub fn weighted_mean(&self) -> f64 {
        self.psi.iter().zip(self.masses()).filter_map(|(p, m)| p.map(|p| p * m)).sum()
    }

    /// `sum_bins psi_b * mean(f over bin) * mass_b` for scalar states `xs`
    /// (the samples the regression was built from).
    pub fn reconstruct(&self, f: &dyn TestFunction, xs: &[f64]) -> f64 {
        let mut f_sum = vec![0.0; self.counts.len()];
        for (x, b) in xs.iter().zip(&self.bin_of) {
            f_sum[*b] += f.eval(std::slice::from_ref(x));
        }
        let n = self.n_samples() as f64;
        self.psi
            .iter()
            .zip(&f_sum)
            .filter_map(|(p, s)| p.map(|p| p * s / n))
            .sum()
    }
}

/// Bins scalar terminal states and averages the weights in each bin.
pub fn conditional_weight_regression(terminal: &[f64], weights: &[f64], n_bins: usize) -> Result<WeightRegression> {
    if terminal.len() != weights.len() {
        return Err(Error::ParticleCountMismatch {
            left: terminal.len(),
            right: weights.len(),
        });
    }
    let (lo, hi) = shared_bins(terminal, terminal, n_bins)?;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let bin_of: Vec<usize> = terminal.iter().map(|x| bin_index(*x, lo, hi, n_bins)).collect();
    for (b, w) in bin_of.iter().zip(weights) {
        sums[*b] += w;
        counts[*b] += 1;
    }
    let psi = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
        .collect();
    let edges = (0..=n_bins).map(|k| lo + (hi - lo) * k as f64 / n_bins as f64).collect();
    Ok(WeightRegression {
        edges,
        psi,
        counts,
        bin_of,
    })
}
