//! Number types for forward-mode differentiation.
//!
//! [`Scalar`] is the ring interface every model is written against. Three
//! implementations are provided: plain `f64`, [`Dual`] (value plus one
//! directional derivative) and [`Jet`] (truncated Taylor series in time over
//! any other scalar). Composing `Jet<Dual>` gives time-Taylor coefficients
//! together with their derivative along one seeded state direction.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

/// Maximum number of Taylor coefficients a [`Jet`] can hold.
pub const JET_CAPACITY: usize = 16;

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Mul<f64, Output = Self>
{
    fn from_f64(c: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    /// The primal `f64` value.
    fn value(&self) -> f64;

    fn is_finite(&self) -> bool;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(c: f64) -> Self {
        c
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

/// Dual number `v + d·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
}

impl Mul<f64> for Dual {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        Dual::new(self.v * c, self.d * c)
    }
}

impl Neg for Dual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.d)
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(c: f64) -> Self {
        Dual::new(c, 0.0)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
    #[inline]
    fn is_finite(&self) -> bool {
        self.v.is_finite() && self.d.is_finite()
    }
}

/// Truncated Taylor series `Σ c[k] tᵏ`, `k < len`.
///
/// Constants carry `len = JET_CAPACITY` so that mixing them with a shorter
/// jet truncates to the shorter length.
#[derive(Clone, Copy, Debug)]
pub struct Jet<S: Scalar> {
    c: [S; JET_CAPACITY],
    len: usize,
    /// Only `c[0]` may be non-zero.
    constant: bool,
}

impl<S: Scalar> Jet<S> {
    /// Jet holding `coeffs` (at most `JET_CAPACITY` of them).
    pub fn from_coeffs(coeffs: &[S]) -> Self {
        assert!(coeffs.len() <= JET_CAPACITY, "jet capacity exceeded");
        let mut c = [S::zero(); JET_CAPACITY];
        c[..coeffs.len()].copy_from_slice(coeffs);
        Self {
            c,
            len: coeffs.len(),
            constant: false,
        }
    }

    /// Time-constant jet with value `v`.
    pub fn constant(v: S) -> Self {
        let mut c = [S::zero(); JET_CAPACITY];
        c[0] = v;
        Self {
            c,
            len: JET_CAPACITY,
            constant: true,
        }
    }

    fn scaled(self, s: S) -> Self {
        let mut c = self.c;
        for v in c.iter_mut().take(self.len) {
            *v = *v * s;
        }
        Self { c, ..self }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn coeff(&self, k: usize) -> S {
        if k < self.len {
            self.c[k]
        } else {
            S::zero()
        }
    }

    pub fn coeffs(&self) -> &[S] {
        &self.c[..self.len]
    }
}

impl<S: Scalar> Add for Jet<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        if o.constant {
            let mut c = self.c;
            c[0] = c[0] + o.c[0];
            return Self { c, ..self };
        }
        if self.constant {
            return o + self;
        }
        let len = self.len.min(o.len);
        let mut c = [S::zero(); JET_CAPACITY];
        for k in 0..len {
            c[k] = self.c[k] + o.c[k];
        }
        Self { c, len, constant: false }
    }
}

impl<S: Scalar> Sub for Jet<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        if o.constant {
            let mut c = self.c;
            c[0] = c[0] - o.c[0];
            return Self { c, ..self };
        }
        let len = self.len.min(o.len);
        let mut c = [S::zero(); JET_CAPACITY];
        for k in 0..len {
            c[k] = self.c[k] - o.c[k];
        }
        Self { c, len, constant: false }
    }
}

impl<S: Scalar> Mul for Jet<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        if o.constant {
            return self.scaled(o.c[0]);
        }
        if self.constant {
            return o.scaled(self.c[0]);
        }
        let len = self.len.min(o.len);
        let mut c = [S::zero(); JET_CAPACITY];
        // Cauchy product, truncated.
        for k in 0..len {
            let mut acc = self.c[0] * o.c[k];
            for i in 1..=k {
                acc = acc + self.c[i] * o.c[k - i];
            }
            c[k] = acc;
        }
        Self { c, len, constant: false }
    }
}

impl<S: Scalar> Mul<f64> for Jet<S> {
    type Output = Self;
    #[inline]
    fn mul(self, s: f64) -> Self {
        let mut c = self.c;
        for v in c.iter_mut().take(self.len) {
            *v = *v * s;
        }
        Self { c, ..self }
    }
}

impl<S: Scalar> Neg for Jet<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<S: Scalar> Scalar for Jet<S> {
    fn from_f64(v: f64) -> Self {
        Self::constant(S::from_f64(v))
    }

    fn value(&self) -> f64 {
        self.coeff(0).value()
    }

    fn is_finite(&self) -> bool {
        self.coeffs().iter().all(|c| c.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_product_rule() {
        let a = Dual::new(3.0, 1.0);
        let b = Dual::new(2.0, 0.0);
        let p = a * a * b;
        assert_eq!(p.v, 18.0);
        assert_eq!(p.d, 12.0);
    }

    #[test]
    fn constant_jets_take_the_scaling_path() {
        let a = Jet::from_coeffs(&[2.0, 1.0, -1.0]);
        let k = Jet::constant(3.0);
        assert_eq!((a * k).coeffs(), &[6.0, 3.0, -3.0]);
        assert_eq!((k * a).coeffs(), &[6.0, 3.0, -3.0]);
        assert_eq!((a - k).coeffs(), &[-1.0, 1.0, -1.0]);
        assert_eq!((k + a).coeffs(), &[5.0, 1.0, -1.0]);
        assert_eq!((k * k).coeff(0), 9.0);
    }

    #[test]
    fn jet_product_is_polynomial_product() {
        // (1 + t)(1 - t + t²) = 1 + t³
        let a = Jet::from_coeffs(&[1.0, 1.0, 0.0, 0.0]);
        let b = Jet::from_coeffs(&[1.0, -1.0, 1.0, 0.0]);
        let p = a * b;
        assert_eq!(p.coeffs(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_mixing_keeps_shorter_length() {
        let a = Jet::from_coeffs(&[2.0, 1.0]);
        let p = a * Jet::from_f64(3.0) + Jet::from_f64(1.0);
        assert_eq!(p.len(), 2);
        assert_eq!(p.coeffs(), &[7.0, 3.0]);
    }
}
