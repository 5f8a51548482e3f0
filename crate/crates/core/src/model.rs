//! Coefficient models: drift, diffusion, their spatial gradients and the
//! Lions-derivative kernel of the drift.
//!
//! Matrix layouts are row-major. For a model of state dimension `d` and noise
//! dimension `q`:
//! * `drift_grad`: `d x d`, entry `(i, j)` is `d b_i / d x_j`;
//! * `drift_lions`: `d x d`, row `i` is `D^L b_i(t, x, .)(mu)(z)`;
//! * `diffusion`: `d x q`;
//! * `diffusion_grad`: `d x d x q`, slice `k` is `d sigma / d x_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::EmpiricalMeasure;
use crate::stats::{self, CHUNK};

pub trait CoefficientModel: Send + Sync {
    fn dim(&self) -> usize;

    fn noise_dim(&self) -> usize {
        self.dim()
    }

    /// Identifier recorded in trajectory metadata.
    fn name(&self) -> &str;

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]);

    fn drift_grad(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]);

    fn drift_lions(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, z: &[f64], out: &mut [f64]);

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn diffusion_grad(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    /// Writes `sigma(t, x)^{-1}` and returns `false` when the diffusion is
    /// singular or not square.
    fn diffusion_inv(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim();
        if self.noise_dim() != d {
            return false;
        }
        let mut s = vec![0.0; d * d];
        self.diffusion(t, x, &mut s);
        match linalg::invert(&s, d) {
            Some(inv) => {
                out.copy_from_slice(&inv);
                true
            }
            None => false,
        }
    }

    /// Declared bound on the drift derivatives (spatial and Lions).
    fn bound_k(&self, t: f64) -> f64;

    /// Declared bound on `|sigma^{-1}|`.
    fn bound_lambda(&self, t: f64) -> f64;

    /// `true` when `sigma` does not depend on the state, so every direction
    /// of a Cameron-Martin shift may be used.
    fn diffusion_is_state_free(&self) -> bool {
        false
    }

    /// For every particle `i`, writes `(1/N) sum_j DLb(t, X^i, mu)(X^j) u^j`
    /// into row `i` of `out`, where `mu` is the empirical measure of the
    /// `X^j`. The default costs `O(N^2)`; models with a constant kernel
    /// should override it.
    fn lions_drift_field(&self, t: f64, mu: &EmpiricalMeasure<'_>, u: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let n = mu.len();
        out.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, chunk)| {
            let mut kernel = vec![0.0; d * d];
            let mut acc = vec![0.0; n * d];
            for (r, row) in chunk.chunks_exact_mut(d).enumerate() {
                let x = mu.particle(c * CHUNK + r);
                for (j, a) in acc.chunks_exact_mut(d).enumerate() {
                    self.drift_lions(t, x, mu, mu.particle(j), &mut kernel);
                    linalg::mat_vec(&kernel, d, d, &u[j * d..(j + 1) * d], a);
                }
                let means = stats::column_means(&acc, d);
                row.copy_from_slice(&means);
            }
        });
    }

    /// Lions-derivative term of a measure-dependent diffusion. When the model
    /// supports it, writes for every particle the `d x q` matrix
    /// `(1/N) sum_j D^L sigma(t, X^i, .)(mu)(X^j) u^j` and returns `true`.
    /// Built-in models have measure-free diffusions and return `false`.
    fn diffusion_lions_field(&self, _t: f64, _mu: &EmpiricalMeasure<'_>, _u: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// Outcome of [`check_model`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelReport {
    /// Largest relative gap between `drift_grad` and a central difference of `drift`.
    pub grad_rel_error: f64,
    /// Largest `|sigma sigma^{-1} - I|` entry (`None` for non-square diffusions).
    pub inverse_error: Option<f64>,
    /// Largest ratio of a sampled derivative norm to the declared `K(t)`.
    pub k_ratio: f64,
    /// Largest ratio of a sampled `|sigma^{-1}|` to the declared `lambda(t)`.
    pub lambda_ratio: Option<f64>,
}

impl ModelReport {
    pub fn passes(&self) -> bool {
        self.grad_rel_error <= 1e-4
            && self.inverse_error.is_none_or(|e| e <= 1e-10)
            && self.k_ratio <= 1.0 + 1e-6
            && self.lambda_ratio.is_none_or(|r| r <= 1.0 + 1e-6)
    }
}

/// Samples `n_points` states from the ensemble (perturbed by unit Gaussian
/// noise) and times in `[0, horizon]`, and compares the model's declared
/// derivatives and bounds with what its own callables produce.
pub fn check_model(
    model: &dyn CoefficientModel,
    ensemble: &[f64],
    horizon: f64,
    n_points: usize,
    seed: u64,
) -> Result<ModelReport> {
    let d = model.dim();
    let q = model.noise_dim();
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !ensemble.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            context: "check_model ensemble",
            expected: d,
            found: ensemble.len() % d,
        });
    }
    let mu = EmpiricalMeasure::new(d, ensemble);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ModelReport::default();
    let mut x = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut grad = vec![0.0; d * d];
    let mut kernel = vec![0.0; d * d];
    let mut bp = vec![0.0; d];
    let mut bm = vec![0.0; d];
    let mut sig = vec![0.0; d * q];
    let mut inv = vec![0.0; d * d];
    let square = q == d;
    for _ in 0..n_points {
        let t = horizon * rng.random::<f64>();
        let i = rng.random_range(0..mu.len());
        let j = rng.random_range(0..mu.len());
        for k in 0..d {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            x[k] = mu.particle(i)[k] + e;
            z[k] = mu.particle(j)[k];
        }
        model.drift_grad(t, &x, &mu, &mut grad);
        for col in 0..d {
            let h = 1e-5 * (1.0 + x[col].abs());
            let keep = x[col];
            x[col] = keep + h;
            model.drift(t, &x, &mu, &mut bp);
            x[col] = keep - h;
            model.drift(t, &x, &mu, &mut bm);
            x[col] = keep;
            for row in 0..d {
                let fd = (bp[row] - bm[row]) / (2.0 * h);
                let g = grad[row * d + col];
                let err = (fd - g).abs() / g.abs().max(1.0);
                report.grad_rel_error = report.grad_rel_error.max(err);
            }
        }
        model.drift_lions(t, &x, &mu, &z, &mut kernel);
        let k = model.bound_k(t);
        let norm = linalg::op_norm(&grad, d, d).max(linalg::op_norm(&kernel, d, d));
        report.k_ratio = report.k_ratio.max(ratio(norm, k));
        if square {
            model.diffusion(t, &x, &mut sig);
            if !model.diffusion_inv(t, &x, &mut inv) {
                return Err(Error::SingularDiffusion { time: t, particle: i });
            }
            let prod = linalg::mat_mul(&sig, &inv, d, d, d);
            let err = prod
                .iter()
                .enumerate()
                .map(|(idx, p)| (p - if idx / d == idx % d { 1.0 } else { 0.0 }).abs())
                .fold(0.0, f64::max);
            report.inverse_error = Some(report.inverse_error.unwrap_or(0.0).max(err));
            let r = ratio(linalg::op_norm(&inv, d, d), model.bound_lambda(t));
            report.lambda_ratio = Some(report.lambda_ratio.unwrap_or(0.0).max(r));
        }
    }
    Ok(report)
}

fn ratio(value: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        value / bound
    } else if value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}
