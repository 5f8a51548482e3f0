//! Order-fixed reductions. Chunk boundaries depend only on the input length,
//! never on the thread pool, so results are identical for any thread count.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 4096;

fn pairwise(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise(&xs[..mid]) + pairwise(&xs[mid..])
}

/// Deterministic sum.
pub fn sum(xs: &[f64]) -> f64 {
    if xs.len() <= CHUNK {
        return pairwise(xs);
    }
    let partial: Vec<f64> = xs.par_chunks(CHUNK).map(pairwise).collect();
    pairwise(&partial)
}

pub fn mean(xs: &[f64]) -> f64 {
    sum(xs) / xs.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.par_iter().map(|x| (x - m) * (x - m)).collect();
    sum(&sq) / (n - 1) as f64
}

/// `(mean, standard error)` of i.i.d.-style samples.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    (m, (sample_variance(xs) / n as f64).sqrt())
}

/// Per-column means of an `n x d` row-major array.
pub fn column_means(values: &[f64], d: usize) -> Vec<f64> {
    if d == 0 {
        return Vec::new();
    }
    let n = values.len() / d;
    let partial: Vec<Vec<f64>> = values
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut acc = vec![0.0; d];
            for row in chunk.chunks_exact(d) {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; d];
    for p in &partial {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_are_thread_independent() {
        let xs: Vec<f64> = (0..100_003).map(|i| ((i * 7919) % 1000) as f64 * 1e-3 - 0.37).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| (sum(&xs), sample_variance(&xs), column_means(&xs[..100_000], 4)));
        let b = four.install(|| (sum(&xs), sample_variance(&xs), column_means(&xs[..100_000], 4)));
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn moments() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!((log_log_slope(&[1.0, 2.0, 4.0], &[3.0, 1.5, 0.75]) + 1.0).abs() < 1e-12);
    }
}
