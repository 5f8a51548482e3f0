use crate::error::{invalid, Result};

/// Uniform time grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be finite and > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(invalid("n_steps must be positive"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Grid point `t_k`; the last point is exactly the horizon.
    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }

    /// Composite trapezoid rule of `values` sampled at the grid points.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_steps + 1);
        let interior: f64 = values[1..self.n_steps].iter().sum();
        self.dt() * (0.5 * (values[0] + values[self.n_steps]) + interior)
    }

    /// Running trapezoid integrals `\int_0^{t_k}` for every grid point.
    pub fn cumulative_trapezoid(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.n_steps + 1);
        let dt = self.dt();
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in values.windows(2) {
            acc += 0.5 * dt * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }
}
