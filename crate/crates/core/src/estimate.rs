//! Monte Carlo results.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Weighted estimator `E[f(X_T) int <zeta, dW>]`.
    Bismut,
    /// Weighted estimator for degenerate Hamiltonian systems.
    Degenerate,
    /// `E[<grad f(X_T), v_T>]`.
    Pathwise,
    /// Central or forward difference of `mu -> P_T f(mu)` along `phi`.
    FiniteDifference,
    /// Plain Monte Carlo mean of `f(X_T)`.
    Mean,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Bismut => "bismut",
            Method::Degenerate => "degenerate",
            Method::Pathwise => "pathwise",
            Method::FiniteDifference => "finite_difference",
            Method::Mean => "mean",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub seed: u64,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_particles: usize,
    /// Free-form key/value annotations (g function, shift size, ...).
    pub notes: Vec<(String, String)>,
}

impl RunMetadata {
    pub fn new(seed: u64, grid: TimeGrid, n_particles: usize) -> Self {
        Self {
            seed,
            horizon: grid.horizon(),
            n_steps: grid.n_steps(),
            n_particles,
            notes: Vec::new(),
        }
    }

    pub fn with_note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.push((key.to_string(), value.to_string()));
        self
    }

    pub fn note(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: Method,
    pub meta: RunMetadata,
}

impl EstimatorResult {
    /// Mean and standard error (`sd / sqrt(n)`) of per-particle samples.
    pub fn from_samples(samples: &[f64], method: Method, meta: RunMetadata) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let (value, std_error) = stats::mean_and_se(samples);
        if !value.is_finite() || !std_error.is_finite() {
            return Err(Error::NonFinite("estimator samples"));
        }
        Ok(Self {
            value,
            std_error,
            n_samples: samples.len(),
            method,
            meta,
        })
    }

    /// `|self - other| <= k * (se_self + se_other) + slack`.
    pub fn agrees_with(&self, other: &EstimatorResult, k: f64, slack: f64) -> bool {
        (self.value - other.value).abs() <= k * (self.std_error + other.std_error) + slack
    }

    /// `|self - target| <= k * se + slack`.
    pub fn is_near(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error + slack
    }
}
