//! Counter-based Gaussian increments.
//!
//! Every draw is a pure function of `(seed, step, particle)`: the ChaCha
//! stream is selected by the step index and the word position by the
//! particle index, with a fixed number of words per particle. Any
//! partitioning of the particle loop therefore yields the same numbers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::stats::CHUNK;

const INITIAL_STREAM_BASE: u64 = 1 << 63;

#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    base: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fills `out` (`n_particles x noise_dim`) with `N(0, dt I)` increments
    /// for time step `step`.
    pub fn fill_step(&self, step: usize, noise_dim: usize, dt: f64, out: &mut [f64]) {
        debug_assert!((step as u64) < INITIAL_STREAM_BASE);
        let scale = dt.sqrt();
        let pairs = noise_dim.div_ceil(2);
        let words = 4 * pairs as u128;
        out.par_chunks_mut(CHUNK * noise_dim)
            .enumerate()
            .for_each(|(c, chunk)| {
                let mut rng = self.base.clone();
                rng.set_stream(step as u64);
                rng.set_word_pos((c * CHUNK) as u128 * words);
                for row in chunk.chunks_exact_mut(noise_dim) {
                    for p in 0..pairs {
                        let (z0, z1) = box_muller(&mut rng);
                        row[2 * p] = scale * z0;
                        if 2 * p + 1 < noise_dim {
                            row[2 * p + 1] = scale * z1;
                        }
                    }
                }
            });
    }

    /// Independent generator for drawing the initial state of `particle`.
    pub fn initial_rng(&self, particle: usize) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(INITIAL_STREAM_BASE + particle as u64);
        rng.set_word_pos(0);
        rng
    }
}

#[inline]
fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = unit_open(rng);
    let u2 = unit_open(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}
