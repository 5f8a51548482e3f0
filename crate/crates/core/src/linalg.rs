//! Row-major dense helpers for the small matrices that appear per particle.

use nalgebra::DMatrix;

/// `out = a * x` for a `rows x cols` matrix.
#[inline]
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

/// `out += a * x`.
#[inline]
pub fn mat_vec_add(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        out[i] += row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>();
    }
}

/// `a (n x k) * b (k x m)`.
pub fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += ail * b[l * m + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn to_dmatrix(a: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, a)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of a square matrix, `None` when singular.
pub fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 1 {
        return (a[0] != 0.0 && a[0].is_finite()).then(|| vec![1.0 / a[0]]);
    }
    to_dmatrix(a, n, n).try_inverse().map(|m| from_dmatrix(&m))
}

/// Spectral (operator 2-) norm.
pub fn op_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows == 1 || cols == 1 {
        return a.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    to_dmatrix(a, rows, cols)
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Ratio of extreme singular values; infinite when singular.
pub fn condition_number(a: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let sv = to_dmatrix(a, n, n).singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_sym_eigenvalue(a: &[f64], n: usize) -> f64 {
    if n == 1 {
        return a[0];
    }
    let m = to_dmatrix(a, n, n);
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank with relative tolerance `rel_tol * largest singular value`.
pub fn rank(a: &[f64], rows: usize, cols: usize, rel_tol: f64) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let sv = to_dmatrix(a, rows, cols).singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}
