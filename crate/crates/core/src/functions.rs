//! Test functions `f` and perturbation directions `phi`.

use crate::error::{invalid, Result};

/// Bounded (or at least integrable) test function on the state space.
pub trait TestFunction: Sync {
    fn eval(&self, x: &[f64]) -> f64;

    /// Writes `grad f(x)` and returns `true`, or returns `false` when `f` is
    /// not differentiable.
    fn gradient(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// Vector field `phi: R^d -> R^d` defining the direction of the Lions derivative.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constant(pub f64);

impl TestFunction for Constant {
    fn eval(&self, _x: &[f64]) -> f64 {
        self.0
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
}

/// `x -> x[index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate(pub usize);

impl TestFunction for Coordinate {
    fn eval(&self, x: &[f64]) -> f64 {
        x[self.0]
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        out[self.0] = 1.0;
        true
    }
}

/// `x -> sum_k c_k x[index]^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub index: usize,
    pub coefficients: Vec<f64>,
}

impl TestFunction for Polynomial {
    fn eval(&self, x: &[f64]) -> f64 {
        let y = x[self.index];
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * y + c)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let y = x[self.index];
        let d = self
            .coefficients
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * y + k as f64 * c);
        out.fill(0.0);
        out[self.index] = d;
        true
    }
}

/// `x -> 1{x[index] > threshold}`; measurable, not differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    pub index: usize,
    pub threshold: f64,
}

impl TestFunction for Indicator {
    fn eval(&self, x: &[f64]) -> f64 {
        if x[self.index] > self.threshold {
            1.0
        } else {
            0.0
        }
    }
}

/// Closure-backed test function with optional gradient.
pub struct FnTest<F, G = fn(&[f64], &mut [f64])> {
    f: F,
    grad: Option<G>,
}

impl<F> FnTest<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f, grad: None }
    }
}

impl<F, G> FnTest<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn with_gradient(f: F, grad: G) -> Self {
        Self { f, grad: Some(grad) }
    }
}

impl<F, G> TestFunction for FnTest<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.grad {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }
}

/// `phi(x) = v` for all `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField(pub Vec<f64>);

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// `phi(x) = M x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    dim: usize,
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

impl AffineField {
    pub fn new(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let dim = offset.len();
        if dim == 0 || matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
            return Err(invalid("affine field needs a square matrix matching the offset"));
        }
        Ok(Self {
            dim,
            matrix: matrix.concat(),
            offset,
        })
    }
}

impl VectorField for AffineField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        crate::linalg::mat_vec(&self.matrix, self.dim, self.dim, x, out);
        for (o, b) in out.iter_mut().zip(&self.offset) {
            *o += b;
        }
    }
}

/// Closure-backed vector field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// `phi` evaluated at every particle; rejects non-finite values.
pub(crate) fn eval_field(phi: &dyn VectorField, states: &[f64], dim: usize) -> Result<Vec<f64>> {
    if phi.dim() != dim {
        return Err(crate::error::Error::DimensionMismatch {
            context: "direction field",
            expected: dim,
            found: phi.dim(),
        });
    }
    let mut out = vec![0.0; states.len()];
    for (x, o) in states.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        phi.eval(x, o);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::Error::NonFinite("direction field"));
    }
    Ok(out)
}
