//! Initial laws `mu` sampled through per-particle generators.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::measure::ParticleEnsemble;
use crate::noise::NoiseSource;
use crate::stats::CHUNK;

pub trait InitialLaw: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Product Gaussian with independent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianLaw {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(invalid("gaussian law needs equal, non-empty mean and std"));
        }
        if std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("gaussian law parameters must be finite with std >= 0"));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

impl InitialLaw for GaussianLaw {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for ((o, m), s) in out.iter_mut().zip(&self.mean).zip(&self.std) {
            let z: f64 = StandardNormal.sample(rng);
            *o = m + s * z;
        }
    }
}

/// Point mass `delta_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracLaw(pub Vec<f64>);

impl InitialLaw for DiracLaw {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, _rng: &mut dyn RngCore, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Draws `n` i.i.d. particles; particle `i` only ever sees its own stream.
pub fn sample_ensemble(law: &dyn InitialLaw, n: usize, noise: &NoiseSource) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(crate::error::Error::EmptyEnsemble);
    }
    let d = law.dim();
    let mut states = vec![0.0; n * d];
    states
        .par_chunks_mut(CHUNK * d)
        .enumerate()
        .for_each(|(c, chunk)| {
            for (k, row) in chunk.chunks_exact_mut(d).enumerate() {
                let mut rng = noise.initial_rng(c * CHUNK + k);
                law.sample(&mut rng, row);
            }
        });
    ParticleEnsemble::new(d, states)
}
