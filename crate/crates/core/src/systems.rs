//! Small reference systems used for validation, scans and the toy planner.

use nalgebra::DMatrix;

use crate::liealg::{Scalar, SmoothSystem};

/// `ẋ = A x + B u`, `y = C x`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSystem {
    /// Autonomous system with no inputs.
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let n = a.nrows();
        Self {
            a,
            b: DMatrix::zeros(n, 0),
            c,
        }
    }

    pub fn with_input(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        Self { a, b, c }
    }
}

fn mat_vec<S: Scalar>(m: &DMatrix<f64>, x: &[S], out: &mut [S]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = S::zero();
        for (j, xj) in x.iter().enumerate() {
            let a = m[(i, j)];
            if a != 0.0 {
                acc = acc + *xj * a;
            }
        }
        *o = acc;
    }
}

impl SmoothSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
    fn dynamics<S: Scalar>(&self, x: &[S], u: &[S], out: &mut [S]) {
        mat_vec(&self.a, x, out);
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &uj) in u.iter().enumerate() {
                let b = self.b[(i, j)];
                if b != 0.0 {
                    *o = *o + uj * b;
                }
            }
        }
    }
    fn observation<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        mat_vec(&self.c, x, out);
    }
}

/// Chain of integrators `ẋᵢ = xᵢ₊₁`, `ẋₙ = 0`, observed through `h = x₁`.
/// Its local observability index is `length − 1`.
#[derive(Clone, Copy, Debug)]
pub struct IntegratorChain {
    pub length: usize,
}

impl IntegratorChain {
    pub fn new(length: usize) -> Self {
        assert!(length >= 1);
        Self { length }
    }
}

impl SmoothSystem for IntegratorChain {
    fn state_dim(&self) -> usize {
        self.length
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn dynamics<S: Scalar>(&self, x: &[S], _u: &[S], out: &mut [S]) {
        for i in 0..self.length - 1 {
            out[i] = x[i + 1];
        }
        out[self.length - 1] = S::zero();
    }
    fn observation<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = x[0];
    }
}

/// Scalar `ẋ = a·x^p`, `h = x`.
#[derive(Clone, Copy, Debug)]
pub struct ScalarPolynomial {
    pub gain: f64,
    pub power: u32,
}

impl ScalarPolynomial {
    /// `ẋ = x`.
    pub fn exponential() -> Self {
        Self { gain: 1.0, power: 1 }
    }

    /// `ẋ = x²`.
    pub fn quadratic() -> Self {
        Self { gain: 1.0, power: 2 }
    }
}

impl SmoothSystem for ScalarPolynomial {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn dynamics<S: Scalar>(&self, x: &[S], _u: &[S], out: &mut [S]) {
        let mut acc = S::from_f64(self.gain);
        for _ in 0..self.power {
            acc = acc * x[0];
        }
        out[0] = acc;
    }
    fn observation<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = x[0];
    }
}

/// Planar single integrator with a half-squared-range sensor:
/// `ẋ = u`, `y = ½‖x‖²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlanarRangeOnly;

impl SmoothSystem for PlanarRangeOnly {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn dynamics<S: Scalar>(&self, _x: &[S], u: &[S], out: &mut [S]) {
        out[0] = u[0];
        out[1] = u[1];
    }
    fn observation<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = (x[0] * x[0] + x[1] * x[1]) * 0.5;
    }
}
