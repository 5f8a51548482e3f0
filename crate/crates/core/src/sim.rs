//! Interacting-particle Euler-Maruyama scheme.
//!
//! Each step freezes the empirical measure of the pre-step states and
//! advances every particle with it:
//! `X^i <- X^i + b(t, X^i, mu^N) dt + sigma(t, X^i) dW^i`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functions::{eval_field, VectorField};
use crate::grid::TimeGrid;
use crate::initial::{sample_ensemble, InitialLaw};
use crate::measure::{EmpiricalMeasure, ParticleEnsemble};
use crate::model::CoefficientModel;
use crate::noise::NoiseSource;
use crate::stats::CHUNK;

/// Advances `states` by one step into `out`, using `mu` (the measure of
/// `states`) for every particle.
pub(crate) fn advance(
    model: &dyn CoefficientModel,
    t: f64,
    dt: f64,
    states: &[f64],
    mu: &EmpiricalMeasure<'_>,
    dw: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let d = model.dim();
    let q = model.noise_dim();
    let bad = out
        .par_chunks_mut(CHUNK * d)
        .enumerate()
        .filter_map(|(c, chunk)| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * q];
            let mut first_bad = None;
            for (r, row) in chunk.chunks_exact_mut(d).enumerate() {
                let i = c * CHUNK + r;
                let x = &states[i * d..(i + 1) * d];
                let z = &dw[i * q..(i + 1) * q];
                model.drift(t, x, mu, &mut b);
                model.diffusion(t, x, &mut s);
                for k in 0..d {
                    let noise: f64 = s[k * q..(k + 1) * q].iter().zip(z).map(|(a, w)| a * w).sum();
                    row[k] = x[k] + b[k] * dt + noise;
                }
                if first_bad.is_none() && row.iter().any(|v| !v.is_finite()) {
                    first_bad = Some(i);
                }
            }
            first_bad
        })
        .min();
    match bad {
        Some(particle) => Err(Error::Explosion { time: t + dt, particle }),
        None => Ok(()),
    }
}

/// One Euler-Maruyama step of the whole ensemble. `noise` holds one
/// `N(0, dt I)` increment per particle (`N x q`).
pub fn euler_step(
    ens: &ParticleEnsemble,
    t: f64,
    dt: f64,
    noise: &[f64],
    model: &dyn CoefficientModel,
) -> Result<ParticleEnsemble> {
    if !(dt > 0.0) {
        return Err(crate::error::invalid("dt must be positive"));
    }
    check_dim(model, ens.dim())?;
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let q = model.noise_dim();
    if noise.len() != ens.len() * q {
        return Err(Error::DimensionMismatch {
            context: "noise increments",
            expected: ens.len() * q,
            found: noise.len(),
        });
    }
    let mu = ens.measure();
    let mut out = vec![0.0; ens.states().len()];
    advance(model, t, dt, ens.states(), &mu, noise, &mut out)?;
    Ok(ParticleEnsemble::from_raw(ens.dim(), out))
}

fn check_dim(model: &dyn CoefficientModel, d: usize) -> Result<()> {
    if model.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "model dimension",
            expected: model.dim(),
            found: d,
        });
    }
    Ok(())
}

/// Particle system advanced one step at a time. Used directly by the
/// streaming estimators (which never store whole paths) and by [`simulate`].
pub struct ParticleSystem<'m> {
    model: &'m dyn CoefficientModel,
    grid: TimeGrid,
    noise: NoiseSource,
    states: Vec<f64>,
    next: Vec<f64>,
    dw: Vec<f64>,
    step: usize,
}

impl<'m> ParticleSystem<'m> {
    pub fn new(
        model: &'m dyn CoefficientModel,
        law: &dyn InitialLaw,
        grid: TimeGrid,
        n_particles: usize,
        seed: u64,
    ) -> Result<Self> {
        let noise = NoiseSource::new(seed);
        if law.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                context: "initial law",
                expected: model.dim(),
                found: law.dim(),
            });
        }
        let initial = sample_ensemble(law, n_particles, &noise)?;
        Self::from_states(model, grid, initial.into_states(), seed)
    }

    /// Starts from given states; increments are still drawn from `seed`.
    pub fn from_states(model: &'m dyn CoefficientModel, grid: TimeGrid, states: Vec<f64>, seed: u64) -> Result<Self> {
        let d = model.dim();
        if states.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if !states.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                context: "initial states",
                expected: d,
                found: states.len() % d,
            });
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("initial states"));
        }
        let n = states.len() / d;
        Ok(Self {
            model,
            grid,
            noise: NoiseSource::new(seed),
            next: vec![0.0; states.len()],
            states,
            dw: vec![0.0; n * model.noise_dim()],
            step: 0,
        })
    }

    pub fn model(&self) -> &'m dyn CoefficientModel {
        self.model
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.states.len() / self.model.dim()
    }

    /// Index of the current grid time.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.grid.time(self.step)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Draws the increments of the current step without advancing.
    pub fn draw(&mut self) -> &[f64] {
        self.noise
            .fill_step(self.step, self.model.noise_dim(), self.grid.dt(), &mut self.dw);
        &self.dw
    }

    /// Increments drawn by the last [`draw`](Self::draw).
    pub fn increments(&self) -> &[f64] {
        &self.dw
    }

    /// Advances with the increments currently held (see [`draw`](Self::draw)).
    pub fn advance(&mut self) -> Result<()> {
        if self.step >= self.grid.n_steps() {
            return Err(crate::error::invalid("particle system already at the horizon"));
        }
        let t = self.time();
        let mu = EmpiricalMeasure::new(self.model.dim(), &self.states);
        advance(self.model, t, self.grid.dt(), &self.states, &mu, &self.dw, &mut self.next)?;
        std::mem::swap(&mut self.states, &mut self.next);
        self.step += 1;
        Ok(())
    }

    /// Advances with externally supplied increments.
    pub fn advance_with(&mut self, dw: &[f64]) -> Result<()> {
        if dw.len() != self.dw.len() {
            return Err(Error::DimensionMismatch {
                context: "noise increments",
                expected: self.dw.len(),
                found: dw.len(),
            });
        }
        self.dw.copy_from_slice(dw);
        self.advance()
    }

    /// Draws the increments and advances.
    pub fn step(&mut self) -> Result<()> {
        self.draw();
        self.advance()
    }

    pub fn into_states(self) -> Vec<f64> {
        self.states
    }
}

/// Whole particle paths together with the Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    grid: TimeGrid,
    dim: usize,
    noise_dim: usize,
    n_particles: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    seed: u64,
    model_id: String,
}

impl TrajectoryBundle {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// States at grid time `k` (`N x d`).
    pub fn states_at(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.dim;
        &self.states[k * w..(k + 1) * w]
    }

    /// Increments of step `k` (`N x q`), taking `t_k` to `t_{k+1}`.
    pub fn increments_at(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.noise_dim;
        &self.increments[k * w..(k + 1) * w]
    }

    pub fn initial(&self) -> ParticleEnsemble {
        ParticleEnsemble::from_raw(self.dim, self.states_at(0).to_vec())
    }

    pub fn terminal(&self) -> ParticleEnsemble {
        ParticleEnsemble::from_raw(self.dim, self.states_at(self.grid.n_steps()).to_vec())
    }

    pub fn all_states(&self) -> &[f64] {
        &self.states
    }

    pub fn all_increments(&self) -> &[f64] {
        &self.increments
    }

    pub(crate) fn check_model(&self, model: &dyn CoefficientModel) -> Result<()> {
        if model.dim() != self.dim || model.noise_dim() != self.noise_dim {
            return Err(Error::DimensionMismatch {
                context: "trajectory and model",
                expected: self.dim,
                found: model.dim(),
            });
        }
        Ok(())
    }
}

/// Simulates `n_particles` interacting particles from `law` on `grid`.
pub fn simulate(
    model: &dyn CoefficientModel,
    law: &dyn InitialLaw,
    grid: TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<TrajectoryBundle> {
    let system = ParticleSystem::new(model, law, grid, n_particles, seed)?;
    record(system, None)
}

fn record(mut system: ParticleSystem<'_>, increments: Option<&[f64]>) -> Result<TrajectoryBundle> {
    let model = system.model;
    let grid = system.grid;
    let n = system.n_particles();
    let (d, q) = (model.dim(), model.noise_dim());
    let mut states = Vec::with_capacity((grid.n_steps() + 1) * n * d);
    let mut incs = Vec::with_capacity(grid.n_steps() * n * q);
    states.extend_from_slice(system.states());
    for k in 0..grid.n_steps() {
        match increments {
            Some(all) => system.advance_with(&all[k * n * q..(k + 1) * n * q])?,
            None => {
                system.draw();
                system.advance()?;
            }
        }
        incs.extend_from_slice(system.increments());
        states.extend_from_slice(system.states());
    }
    Ok(TrajectoryBundle {
        grid,
        dim: d,
        noise_dim: q,
        n_particles: n,
        states,
        increments: incs,
        seed: system.noise.seed(),
        model_id: model.name().to_string(),
    })
}

/// `X_0 + eps phi(X_0)` for every particle.
pub(crate) fn shifted_states(states: &[f64], dim: usize, phi: &dyn VectorField, eps: f64) -> Result<Vec<f64>> {
    let dir = eval_field(phi, states, dim)?;
    let out: Vec<f64> = states.iter().zip(&dir).map(|(x, v)| x + eps * v).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("shifted initial states"));
    }
    Ok(out)
}

/// Re-simulates `traj` from `X_0 + eps phi(X_0)` with the same increments.
pub fn clone_shifted(
    traj: &TrajectoryBundle,
    phi: &dyn VectorField,
    eps: f64,
    model: &dyn CoefficientModel,
) -> Result<TrajectoryBundle> {
    traj.check_model(model)?;
    if !eps.is_finite() {
        return Err(crate::error::invalid("shift size must be finite"));
    }
    let start = shifted_states(traj.states_at(0), traj.dim, phi, eps)?;
    if eps == 0.0 {
        // x + 0 * v may flip the sign of a zero; keep the bundle bit-exact.
        return Ok(traj.clone());
    }
    let system = ParticleSystem::from_states(model, traj.grid, start, traj.seed)?;
    let mut out = record(system, Some(&traj.increments))?;
    out.model_id = traj.model_id.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::ConstantField;
    use crate::initial::{DiracLaw, GaussianLaw};
    use crate::models::{LocalModel, MeanFieldOu};
    use crate::stats;

    fn zero_model() -> impl CoefficientModel {
        LocalModel {
            dim: 1,
            drift: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 0.0,
            drift_grad: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 0.0,
            sigma: 0.0,
            k: 0.0,
        }
    }

    #[test]
    fn zero_coefficients_leave_the_ensemble_unchanged() {
        let m = zero_model();
        let e = ParticleEnsemble::new(1, vec![0.5, -1.0, 2.0]).unwrap();
        let next = euler_step(&e, 0.0, 0.1, &[0.3, 0.1, -0.2], &m).unwrap();
        assert_eq!(next, e);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 5, 1).unwrap();
        for k in 0..=10 {
            assert_eq!(traj.states_at(k), traj.states_at(0));
        }
    }

    #[test]
    fn unit_drift_step() {
        let m = LocalModel {
            dim: 1,
            drift: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 1.0,
            drift_grad: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 0.0,
            sigma: 0.0,
            k: 0.0,
        };
        let e = ParticleEnsemble::new(1, vec![0.0]).unwrap();
        let next = euler_step(&e, 0.0, 0.1, &[0.7], &m).unwrap();
        assert_eq!(next.states(), &[0.1]);
    }

    #[test]
    fn explosion_reports_the_first_bad_particle() {
        let m = LocalModel {
            dim: 1,
            drift: |_t: f64, x: &[f64], o: &mut [f64]| o[0] = if x[0] > 1.0 { f64::INFINITY } else { 0.0 },
            drift_grad: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 0.0,
            sigma: 0.0,
            k: 0.0,
        };
        let e = ParticleEnsemble::new(1, vec![0.0, 2.0, 3.0]).unwrap();
        let err = euler_step(&e, 0.5, 0.1, &[0.0; 3], &m).unwrap_err();
        assert!(matches!(err, Error::Explosion { particle: 1, .. }));
        assert!(err.to_string().starts_with("explosion at t"));
    }

    #[test]
    fn initial_states_are_reproducible() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let a = simulate(&m, &GaussianLaw::standard(1), grid, 100, 42).unwrap();
        let b = simulate(&m, &GaussianLaw::standard(1), grid, 100, 42).unwrap();
        let c = simulate(&m, &GaussianLaw::standard(1), grid, 100, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states_at(0), c.states_at(0));
        let direct = sample_ensemble(&GaussianLaw::standard(1), 100, &NoiseSource::new(42)).unwrap();
        assert_eq!(a.states_at(0), direct.states());
    }

    #[test]
    fn brownian_variance_adds_up() {
        let m = LocalModel {
            dim: 1,
            drift: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 0.0,
            drift_grad: |_t: f64, _x: &[f64], o: &mut [f64]| o[0] = 0.0,
            sigma: 1.0,
            k: 0.0,
        };
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let n = 50_000;
        let traj = simulate(&m, &GaussianLaw::new(vec![0.0], vec![0.5]).unwrap(), grid, n, 5).unwrap();
        let var = stats::sample_variance(traj.terminal().states());
        // SE of a sample variance of a Gaussian: var * sqrt(2 / (n - 1)).
        let se = 1.25 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 1.25).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn shifting_by_zero_is_bit_exact_and_constant_shift_translates() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let traj = simulate(&m, &GaussianLaw::standard(1), grid, 50, 7).unwrap();
        assert_eq!(clone_shifted(&traj, &ConstantField(vec![1.0]), 0.0, &m).unwrap(), traj);

        let z = zero_model();
        let traj = simulate(&z, &GaussianLaw::standard(1), grid, 50, 7).unwrap();
        let moved = clone_shifted(&traj, &ConstantField(vec![1.0]), 0.5, &z).unwrap();
        for (a, b) in moved.all_states().iter().zip(traj.all_states()) {
            assert_eq!(*a, b + 0.5);
        }
    }

    #[test]
    fn mean_shift_follows_the_mean_ode() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let traj = simulate(&m, &DiracLaw(vec![1.0]), grid, 200, 3).unwrap();
        let eps = 0.1;
        let moved = clone_shifted(&traj, &ConstantField(vec![1.0]), eps, &m).unwrap();
        let shift = stats::mean(moved.terminal().states()) - stats::mean(traj.terminal().states());
        // Linear model: the shift of the discrete mean is eps * (1 + (a + c) dt)^n exactly.
        let expected = eps * (1.0 - 0.5 * grid.dt()).powi(50);
        assert!((shift - expected).abs() < 1e-12);
        assert!((shift / eps - (-0.5f64).exp()).abs() < 0.01);
    }

    #[test]
    fn thread_count_does_not_change_paths() {
        let m = MeanFieldOu::default();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&m, &GaussianLaw::standard(1), grid, 3 * CHUNK + 11, 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
