//! Built-in models with hand-derived gradients and Lions kernels.

use crate::hamiltonian::HamiltonianModel;
use crate::measure::EmpiricalMeasure;
use crate::model::CoefficientModel;
use crate::stats;

/// Scalar mean-field Ornstein-Uhlenbeck model
/// `dX = (a X + c E[X]) dt + sigma dW`.
///
/// The mean solves `m' = (a + c) m`, so with `phi = 1` the Lions derivative of
/// `E[X_T]` is `exp((a + c) T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldOu {
    pub a: f64,
    pub c: f64,
    pub sigma: f64,
}

impl Default for MeanFieldOu {
    fn default() -> Self {
        Self {
            a: -1.0,
            c: 0.5,
            sigma: 1.0,
        }
    }
}

impl CoefficientModel for MeanFieldOu {
    fn dim(&self) -> usize {
        1
    }

    fn name(&self) -> &str {
        "mean_field_ou"
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        out[0] = self.a * x[0] + self.c * mu.mean()[0];
    }

    fn drift_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        out[0] = self.a;
    }

    fn drift_lions(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, _z: &[f64], out: &mut [f64]) {
        out[0] = self.c;
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }

    fn diffusion_inv(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0 / self.sigma;
        self.sigma != 0.0
    }

    fn bound_k(&self, _t: f64) -> f64 {
        self.a.abs().max(self.c.abs())
    }

    fn bound_lambda(&self, _t: f64) -> f64 {
        1.0 / self.sigma.abs()
    }

    fn diffusion_is_state_free(&self) -> bool {
        true
    }

    fn lions_drift_field(&self, _t: f64, _mu: &EmpiricalMeasure<'_>, u: &[f64], out: &mut [f64]) {
        out.fill(self.c * stats::mean(u));
    }
}

/// Scalar model with a nonlinear interaction,
/// `b(x, mu) = -x + kappa * int tanh(x - z) mu(dz)`, `sigma` constant.
///
/// Its Lions kernel `DLb(x, mu)(z) = -kappa sech^2(x - z)` depends on both
/// arguments. Every drift evaluation averages over the ensemble, so a step
/// costs `O(N^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhInteraction {
    pub kappa: f64,
    pub sigma: f64,
}

impl Default for TanhInteraction {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            sigma: 1.0,
        }
    }
}

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

impl CoefficientModel for TanhInteraction {
    fn dim(&self) -> usize {
        1
    }

    fn name(&self) -> &str {
        "nonlinear_mv"
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        let v: Vec<f64> = mu.particles().map(|z| (x[0] - z[0]).tanh()).collect();
        out[0] = -x[0] + self.kappa * stats::mean(&v);
    }

    fn drift_grad(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        let v: Vec<f64> = mu.particles().map(|z| sech2(x[0] - z[0])).collect();
        out[0] = -1.0 + self.kappa * stats::mean(&v);
    }

    fn drift_lions(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure<'_>, z: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * sech2(x[0] - z[0]);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }

    fn diffusion_inv(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0 / self.sigma;
        self.sigma != 0.0
    }

    fn bound_k(&self, _t: f64) -> f64 {
        // grad b lies in [-1, -1 + kappa] for kappa in [0, 2]; the kernel in [-kappa, 0].
        (1.0f64).max((-1.0 + self.kappa).abs()).max(self.kappa.abs())
    }

    fn bound_lambda(&self, _t: f64) -> f64 {
        1.0 / self.sigma.abs()
    }

    fn diffusion_is_state_free(&self) -> bool {
        true
    }
}

/// Kinetic Langevin dynamics on `R^2`: `dX1 = X2 dt`, `dX2 = -gamma X2 dt + dW`.
///
/// Noise acts on the velocity only, so the diffusion is `2 x 1` and the
/// system is degenerate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KineticLangevin {
    pub friction: f64,
}

impl CoefficientModel for KineticLangevin {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn name(&self) -> &str {
        "kinetic_langevin"
    }

    fn drift(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -self.friction * x[1];
    }

    fn drift_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0, 0.0, -self.friction]);
    }

    fn drift_lions(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }

    fn bound_k(&self, _t: f64) -> f64 {
        1.0f64.max(self.friction.abs())
    }

    fn bound_lambda(&self, _t: f64) -> f64 {
        1.0
    }

    fn diffusion_is_state_free(&self) -> bool {
        true
    }

    fn lions_drift_field(&self, _t: f64, _mu: &EmpiricalMeasure<'_>, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Degenerate three-dimensional model with a linear, controllable position
/// block and a nonlinear, mean-field velocity drift:
///
/// ```text
/// dX1 = X2 dt
/// dX2 = X3 dt
/// dX3 = (-X3 - beta sin(X1) + kappa E[X3]) dt + dW
/// ```
///
/// Positions are `(X1, X2)`, the velocity is `X3`; the position drift is
/// `A x_pos + B x_vel` with `A = [[0, 1], [0, 0]]`, `B = (0, 1)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledChain {
    pub beta: f64,
    pub kappa: f64,
}

impl Default for ControlledChain {
    fn default() -> Self {
        Self {
            beta: 0.5,
            kappa: 0.25,
        }
    }
}

impl ControlledChain {
    pub const A: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
    pub const B: [f64; 2] = [0.0, 1.0];
}

impl CoefficientModel for ControlledChain {
    fn dim(&self) -> usize {
        3
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn name(&self) -> &str {
        "example21_linear"
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        out[0] = x[1];
        out[1] = x[2];
        out[2] = -x[2] - self.beta * x[0].sin() + self.kappa * mu.mean()[2];
    }

    fn drift_grad(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        out.copy_from_slice(&[
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            1.0,
            -self.beta * x[0].cos(),
            0.0,
            -1.0,
        ]);
    }

    fn drift_lions(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[8] = self.kappa;
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.0, 1.0]);
    }

    fn bound_k(&self, _t: f64) -> f64 {
        // Triangle inequality around the beta = 0 gradient.
        let g = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0];
        (crate::linalg::op_norm(&g, 3, 3) + self.beta.abs()).max(self.kappa.abs())
    }

    fn bound_lambda(&self, _t: f64) -> f64 {
        1.0
    }

    fn diffusion_is_state_free(&self) -> bool {
        true
    }

    fn lions_drift_field(&self, _t: f64, _mu: &EmpiricalMeasure<'_>, u: &[f64], out: &mut [f64]) {
        let m = stats::column_means(u, 3);
        for row in out.chunks_exact_mut(3) {
            row[0] = 0.0;
            row[1] = 0.0;
            row[2] = self.kappa * m[2];
        }
    }
}

impl HamiltonianModel for KineticLangevin {
    fn position_dim(&self) -> usize {
        1
    }

    fn sigma(&self, _t: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn control_matrix(&self, _t: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn position_hessian_bound(&self) -> f64 {
        0.0
    }

    fn linear_position_drift(&self) -> bool {
        true
    }

    fn theta(&self, t: f64, horizon: f64) -> Option<f64> {
        // K = I and B = 1: the Gramian is int_0^t s (T - s) ds.
        Some(horizon * t * t / 2.0 - t * t * t / 3.0)
    }
}

impl HamiltonianModel for ControlledChain {
    fn position_dim(&self) -> usize {
        2
    }

    fn sigma(&self, _t: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn control_matrix(&self, _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&Self::B);
    }

    fn position_hessian_bound(&self) -> f64 {
        0.0
    }

    fn linear_position_drift(&self) -> bool {
        true
    }
}

/// Without a position block the degenerate construction reduces to the
/// non-degenerate one.
impl HamiltonianModel for MeanFieldOu {
    fn position_dim(&self) -> usize {
        0
    }

    fn sigma(&self, _t: f64, out: &mut [f64]) {
        out[0] = self.sigma;
    }

    fn control_matrix(&self, _t: f64, _out: &mut [f64]) {}

    fn position_hessian_bound(&self) -> f64 {
        0.0
    }

    fn linear_position_drift(&self) -> bool {
        true
    }
}

/// Model given by closures; handy for tests and user experiments. The drift
/// ignores the measure and the Lions kernel vanishes.
pub struct LocalModel<B, G> {
    pub dim: usize,
    pub drift: B,
    pub drift_grad: G,
    pub sigma: f64,
    pub k: f64,
}

impl<B, G> CoefficientModel for LocalModel<B, G>
where
    B: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
    G: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "local"
    }

    fn drift(&self, t: f64, x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    fn drift_grad(&self, t: f64, x: &[f64], _mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
        (self.drift_grad)(t, x, out)
    }

    fn drift_lions(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure<'_>, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.sigma;
        }
    }

    fn diffusion_inv(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = 1.0 / self.sigma;
        }
        self.sigma != 0.0
    }

    fn bound_k(&self, _t: f64) -> f64 {
        self.k
    }

    fn bound_lambda(&self, _t: f64) -> f64 {
        1.0 / self.sigma.abs()
    }

    fn diffusion_is_state_free(&self) -> bool {
        true
    }

    fn lions_drift_field(&self, _t: f64, _mu: &EmpiricalMeasure<'_>, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial::{GaussianLaw, InitialLaw};
    use crate::model::check_model;
    use crate::noise::NoiseSource;

    fn sample(law: &dyn InitialLaw, n: usize) -> Vec<f64> {
        crate::initial::sample_ensemble(law, n, &NoiseSource::new(9))
            .unwrap()
            .into_states()
    }

    #[test]
    fn built_in_models_pass_the_consistency_check() {
        let e1 = sample(&GaussianLaw::standard(1), 200);
        let e2 = sample(&GaussianLaw::standard(2), 200);
        let e3 = sample(&GaussianLaw::standard(3), 200);
        let models: Vec<(Box<dyn CoefficientModel>, &[f64])> = vec![
            (Box::new(MeanFieldOu::default()), &e1),
            (Box::new(MeanFieldOu { a: -1.0, c: 0.0, sigma: 1.0 }), &e1),
            (Box::new(TanhInteraction::default()), &e1),
            (Box::new(KineticLangevin::default()), &e2),
            (Box::new(ControlledChain::default()), &e3),
        ];
        for (m, e) in models {
            let r = check_model(m.as_ref(), e, 1.0, 100, 1).unwrap();
            assert!(r.passes(), "{}: {r:?}", m.name());
        }
    }

    #[test]
    fn consistency_check_catches_a_wrong_gradient() {
        let e = sample(&GaussianLaw::standard(1), 50);
        let bad = LocalModel {
            dim: 1,
            drift: |_t: f64, x: &[f64], o: &mut [f64]| o[0] = x[0].sin(),
            drift_grad: |_t: f64, x: &[f64], o: &mut [f64]| o[0] = x[0].sin(),
            sigma: 1.0,
            k: 1.0,
        };
        assert!(!check_model(&bad, &e, 1.0, 100, 2).unwrap().passes());
    }

    #[test]
    fn tanh_kernel_is_the_derivative_along_a_measure_shift() {
        // For a shift z -> z + eps u(z), d/deps b(x, mu_eps) = mean_j DLb(x)(z_j) u_j.
        let m = TanhInteraction::default();
        let zs = [-0.7, 0.1, 0.4, 1.3];
        let us = [0.3, -1.0, 0.5, 2.0];
        let x = [0.25];
        let eps = 1e-6;
        let plus: Vec<f64> = zs.iter().zip(&us).map(|(z, u)| z + eps * u).collect();
        let minus: Vec<f64> = zs.iter().zip(&us).map(|(z, u)| z - eps * u).collect();
        let (mut bp, mut bm) = ([0.0], [0.0]);
        m.drift(0.0, &x, &EmpiricalMeasure::new(1, &plus), &mut bp);
        m.drift(0.0, &x, &EmpiricalMeasure::new(1, &minus), &mut bm);
        let fd = (bp[0] - bm[0]) / (2.0 * eps);
        let mu = EmpiricalMeasure::new(1, &zs);
        let mut k = [0.0];
        let mut total = 0.0;
        for (z, u) in zs.iter().zip(&us) {
            m.drift_lions(0.0, &x, &mu, &[*z], &mut k);
            total += k[0] * u;
        }
        assert!((fd - total / 4.0).abs() < 1e-8, "{fd} vs {}", total / 4.0);
    }

    #[test]
    fn overridden_fields_match_the_generic_peer_average() {
        struct Generic<'a>(&'a dyn CoefficientModel);
        impl CoefficientModel for Generic<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn name(&self) -> &str {
                "generic"
            }
            fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
                self.0.drift(t, x, mu, out)
            }
            fn drift_grad(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, out: &mut [f64]) {
                self.0.drift_grad(t, x, mu, out)
            }
            fn drift_lions(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<'_>, z: &[f64], out: &mut [f64]) {
                self.0.drift_lions(t, x, mu, z, out)
            }
            fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
                self.0.diffusion(t, x, out)
            }
            fn bound_k(&self, t: f64) -> f64 {
                self.0.bound_k(t)
            }
            fn bound_lambda(&self, t: f64) -> f64 {
                self.0.bound_lambda(t)
            }
        }
        let e3 = sample(&GaussianLaw::standard(3), 64);
        let u: Vec<f64> = (0..e3.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let chain = ControlledChain::default();
        let mu = EmpiricalMeasure::new(3, &e3);
        let mut fast = vec![0.0; e3.len()];
        let mut slow = vec![0.0; e3.len()];
        chain.lions_drift_field(0.3, &mu, &u, &mut fast);
        Generic(&chain).lions_drift_field(0.3, &mu, &u, &mut slow);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
