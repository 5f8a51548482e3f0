//! Particle ensembles as empirical surrogates of measures in `P_2(R^d)`.

use crate::error::{Error, Result};
use crate::stats;

/// `N` particles in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    states: Vec<f64>,
}

impl ParticleEnsemble {
    /// Builds an ensemble from row-major states; every entry must be finite.
    pub fn new(dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(crate::error::invalid("dimension must be positive"));
        }
        if !states.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                context: "ensemble states",
                expected: dim,
                found: states.len() % dim,
            });
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ensemble states"));
        }
        Ok(Self { dim, states })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyEnsemble)?;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "ensemble rows",
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(dim, rows.concat())
    }

    /// Skips the finiteness scan; callers guarantee it.
    pub(crate) fn from_raw(dim: usize, states: Vec<f64>) -> Self {
        Self { dim, states }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn into_states(self) -> Vec<f64> {
        self.states
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::ChunksExact<'_, f64> {
        self.states.chunks_exact(self.dim)
    }

    /// Values of coordinate `c` across particles.
    pub fn coordinate(&self, c: usize) -> Vec<f64> {
        self.particles().map(|p| p[c]).collect()
    }

    pub fn second_moment(&self) -> f64 {
        let sq: Vec<f64> = self.particles().map(|p| p.iter().map(|x| x * x).sum()).collect();
        stats::mean(&sq)
    }

    pub fn measure(&self) -> EmpiricalMeasure<'_> {
        EmpiricalMeasure::new(self.dim, &self.states)
    }
}

/// Read-only view of an empirical measure `(1/N) sum_j delta_{X^j}` with its
/// mean precomputed once, so mean-field models can query it in O(1).
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure<'a> {
    dim: usize,
    states: &'a [f64],
    mean: Vec<f64>,
}

impl<'a> EmpiricalMeasure<'a> {
    pub fn new(dim: usize, states: &'a [f64]) -> Self {
        let mean = stats::column_means(states, dim);
        Self { dim, states, mean }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn states(&self) -> &'a [f64] {
        self.states
    }

    pub fn particle(&self, j: usize) -> &'a [f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::ChunksExact<'a, f64> {
        self.states.chunks_exact(self.dim)
    }
}

/// Arithmetic mean of the particles.
pub fn empirical_mean(ens: &ParticleEnsemble) -> Result<Vec<f64>> {
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Ok(stats::column_means(ens.states(), ens.dim()))
}

/// Empirical Wasserstein-2 distance between equally sized ensembles.
///
/// In one dimension this is exact: the optimal coupling pairs order
/// statistics. For `d > 1` both ensembles are sorted lexicographically and
/// paired in that order. The pairing is a valid coupling, so the returned
/// value is an upper bound on the exact distance (a surrogate, not the
/// optimum); see [`wasserstein2_is_exact`].
pub fn wasserstein2(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if a.len() != b.len() {
        return Err(Error::ParticleCountMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let sa = sorted_rows(a);
    let sb = sorted_rows(b);
    let sq: Vec<f64> = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| x.iter().zip(*y).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect();
    Ok(stats::mean(&sq).sqrt())
}

/// Whether [`wasserstein2`] is the exact empirical distance for this dimension.
pub fn wasserstein2_is_exact(dim: usize) -> bool {
    dim == 1
}

fn sorted_rows(e: &ParticleEnsemble) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = e.particles().collect();
    rows.sort_by(|x, y| {
        x.iter()
            .zip(*y)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ens1(xs: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::new(1, xs.to_vec()).unwrap()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(empirical_mean(&ens1(&[1.0, 3.0])).unwrap(), vec![2.0]);
        assert_eq!(empirical_mean(&ens1(&[0.0, 0.0, 0.0])).unwrap(), vec![0.0]);
        let e = ParticleEnsemble::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(empirical_mean(&e).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_ensemble_is_rejected() {
        let e = ParticleEnsemble::new(2, vec![]).unwrap();
        assert_eq!(empirical_mean(&e), Err(Error::EmptyEnsemble));
    }

    #[test]
    fn nan_states_are_rejected() {
        assert!(matches!(ParticleEnsemble::new(1, vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn wasserstein_examples() {
        let a = ens1(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein2(&ens1(&[0.0; 4]), &ens1(&[1.0; 4])).unwrap(), 1.0);
        assert_eq!(wasserstein2(&ens1(&[2.0, 0.0]), &ens1(&[1.0, 3.0])).unwrap(), 1.0);
        assert!(matches!(
            wasserstein2(&ens1(&[0.0]), &ens1(&[0.0, 1.0])),
            Err(Error::ParticleCountMismatch { .. })
        ));
    }

    #[test]
    fn multivariate_pairing_is_an_upper_bound() {
        // Two points each; exact W2 via both permutations.
        let a = ParticleEnsemble::from_rows(&[vec![0.0, 0.0], vec![1.0, 5.0]]).unwrap();
        let b = ParticleEnsemble::from_rows(&[vec![0.5, 4.0], vec![0.6, 0.0]]).unwrap();
        let d = |x: &[f64], y: &[f64]| (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        let p0 = 0.5 * (d(a.particle(0), b.particle(0)) + d(a.particle(1), b.particle(1)));
        let p1 = 0.5 * (d(a.particle(0), b.particle(1)) + d(a.particle(1), b.particle(0)));
        let exact = p0.min(p1).sqrt();
        assert!(wasserstein2(&a, &b).unwrap() >= exact - 1e-15);
        assert!(!wasserstein2_is_exact(2));
    }
}
