//! Iterated Lie derivatives and their state gradients.
//!
//! Lie derivatives `L_fʲ h` are read off the Taylor expansion of the response
//! `t ↦ h(x(t))` under a constant input: the j-th time coefficient times `j!`.
//! Gradients `D(L_fʲ h)` come from re-running the whole recursion over
//! [`Dual`] numbers seeded along each state basis direction, which is exact to
//! rounding. Finite differences are only used by [`gradient_check`].

mod scalar;

pub use scalar::{Dual, Jet, Scalar, JET_CAPACITY};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Highest Lie-derivative order supported by the jet capacity.
pub const MAX_ORDER: usize = JET_CAPACITY - 1;

/// A smooth control system `ẋ = f(x, u)`, `y = h(x)`.
///
/// Both maps are written generically over [`Scalar`] so the same code runs on
/// plain floats, dual numbers and Taylor jets. Inputs share the scalar type so
/// sensitivities with respect to `u` come from the same code.
pub trait SmoothSystem {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    /// Writes `f(x, u)` into `out` (length `state_dim`).
    fn dynamics<S: Scalar>(&self, x: &[S], u: &[S], out: &mut [S]);

    /// Writes `h(x)` into `out` (length `obs_dim`).
    fn observation<S: Scalar>(&self, x: &[S], out: &mut [S]);

    /// Maps a numerically integrated state back onto the state manifold.
    fn project(&self, _x: &mut [f64]) {}
}

/// Lie derivatives of `h` along `f(·, u)` and their state gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct JetTable {
    pub order: usize,
    /// Entry `j` is `L_fʲ h(x, u)`.
    pub coefficients: Vec<DVector<f64>>,
    /// Entry `j` is `D(L_fʲ h)(x, u)`, `obs_dim × state_dim`.
    pub gradients: Vec<DMatrix<f64>>,
}

impl JetTable {
    /// Table restricted to orders `0..=order`.
    pub fn truncated(&self, order: usize) -> JetTable {
        let order = order.min(self.order);
        JetTable {
            order,
            coefficients: self.coefficients[..=order].to_vec(),
            gradients: self.gradients[..=order].to_vec(),
        }
    }
}

fn check_dims<Sys: SmoothSystem>(sys: &Sys, x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != sys.state_dim() {
        return Err(Error::Dimension(format!(
            "state has {} components, system expects {}",
            x.len(),
            sys.state_dim()
        )));
    }
    if u.len() != sys.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} components, system expects {}",
            u.len(),
            sys.input_dim()
        )));
    }
    Ok(())
}

fn check_order(order: usize) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::OrderTooHigh {
            requested: order,
            max: MAX_ORDER,
        });
    }
    Ok(())
}

/// Taylor coefficients of the flow over any scalar type.
///
/// Coefficient `k + 1` only depends on coefficients `0..=k`, so each pass
/// evaluates `f` on jets of length `k + 1` and reads off the top coefficient.
fn flow_coefficients<Sys: SmoothSystem, S: Scalar>(
    sys: &Sys,
    x0: &[S],
    u: &[S],
    order: usize,
) -> Result<Vec<Vec<S>>> {
    let n = sys.state_dim();
    let uj: Vec<Jet<S>> = u.iter().map(|&c| Jet::constant(c)).collect();
    let mut coeffs: Vec<Vec<S>> = Vec::with_capacity(order + 1);
    coeffs.push(x0.to_vec());
    let mut column = vec![S::zero(); order + 1];
    let mut xj = vec![Jet::<S>::from_f64(0.0); n];
    let mut fj = vec![Jet::<S>::from_f64(0.0); n];
    for k in 0..order {
        for i in 0..n {
            for (m, c) in column.iter_mut().enumerate().take(k + 1) {
                *c = coeffs[m][i];
            }
            xj[i] = Jet::from_coeffs(&column[..=k]);
        }
        sys.dynamics(&xj, &uj, &mut fj);
        let scale = 1.0 / (k as f64 + 1.0);
        let next: Vec<S> = fj.iter().map(|f| f.coeff(k) * scale).collect();
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCoefficient { order: k + 1 });
        }
        coeffs.push(next);
    }
    Ok(coeffs)
}

/// Taylor coefficients of `h(x(t))` given the flow coefficients.
fn response_coefficients<Sys: SmoothSystem, S: Scalar>(
    sys: &Sys,
    flow: &[Vec<S>],
) -> Result<Vec<Vec<S>>> {
    let n = sys.state_dim();
    let p = sys.obs_dim();
    let len = flow.len();
    let xj: Vec<Jet<S>> = (0..n)
        .map(|i| {
            let col: Vec<S> = flow.iter().map(|c| c[i]).collect();
            Jet::from_coeffs(&col)
        })
        .collect();
    let mut hj = vec![Jet::<S>::from_f64(0.0); p];
    sys.observation(&xj, &mut hj);
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let row: Vec<S> = hj.iter().map(|h| h.coeff(k)).collect();
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCoefficient { order: k });
        }
        out.push(row);
    }
    Ok(out)
}

/// Taylor coefficients of `t ↦ x(t)` at `t = 0` under `ẋ = f(x, u)` with `u`
/// held constant. Entry `j` equals `(1/j!) dʲx/dtʲ(0)`.
pub fn taylor_flow<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    order: usize,
) -> Result<Vec<DVector<f64>>> {
    check_dims(sys, x, u)?;
    check_order(order)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoefficient { order: 0 });
    }
    let coeffs = flow_coefficients(sys, x, u, order)?;
    Ok(coeffs.into_iter().map(DVector::from_vec).collect())
}

/// Lie derivative values only (no gradients).
pub fn lie_values<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    order: usize,
) -> Result<Vec<DVector<f64>>> {
    check_dims(sys, x, u)?;
    check_order(order)?;
    let flow = flow_coefficients(sys, x, u, order)?;
    let resp = response_coefficients(sys, &flow)?;
    let mut fact = 1.0;
    Ok(resp
        .into_iter()
        .enumerate()
        .map(|(j, row)| {
            if j > 0 {
                fact *= j as f64;
            }
            DVector::from_iterator(row.len(), row.into_iter().map(|c| c * fact))
        })
        .collect())
}

/// Lie derivatives `L_fʲ h` and gradients `D(L_fʲ h)` for `j = 0..=order`.
pub fn lie_table<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    order: usize,
) -> Result<JetTable> {
    check_dims(sys, x, u)?;
    check_order(order)?;
    let n = sys.state_dim();
    let p = sys.obs_dim();
    let factorials: Vec<f64> = (0..=order)
        .scan(1.0, |acc, j| {
            if j > 0 {
                *acc *= j as f64;
            }
            Some(*acc)
        })
        .collect();

    let mut coefficients = vec![DVector::zeros(p); order + 1];
    let mut gradients = vec![DMatrix::zeros(p, n); order + 1];
    let mut seeded = vec![Dual::default(); n];
    let u_dual: Vec<Dual> = u.iter().map(|&c| Dual::from_f64(c)).collect();
    for dir in 0..n {
        for (i, s) in seeded.iter_mut().enumerate() {
            *s = Dual::new(x[i], if i == dir { 1.0 } else { 0.0 });
        }
        let flow = flow_coefficients(sys, &seeded, &u_dual, order)?;
        let resp = response_coefficients(sys, &flow)?;
        for (j, row) in resp.iter().enumerate() {
            for (o, c) in row.iter().enumerate() {
                gradients[j][(o, dir)] = c.d * factorials[j];
                if dir == 0 {
                    coefficients[j][o] = c.v * factorials[j];
                }
            }
        }
    }
    Ok(JetTable {
        order,
        coefficients,
        gradients,
    })
}

/// Largest relative deviation between the exact gradients of [`lie_table`]
/// and central finite differences of the Lie derivative values.
///
/// The deviation at order `j` is `‖G_j − G_fd‖_F / max(‖G_j‖_F, 1)`.
pub fn gradient_check<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    order: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {step}")));
    }
    let table = lie_table(sys, x, u, order)?;
    let n = sys.state_dim();
    let p = sys.obs_dim();
    let mut fd = vec![DMatrix::<f64>::zeros(p, n); order + 1];
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + step;
        let plus = lie_values(sys, &xp, u, order)?;
        xp[i] = x[i] - step;
        let minus = lie_values(sys, &xp, u, order)?;
        xp[i] = x[i];
        for j in 0..=order {
            let col = (&plus[j] - &minus[j]) / (2.0 * step);
            fd[j].set_column(i, &col);
        }
    }
    let mut worst: f64 = 0.0;
    for j in 0..=order {
        let dev = (&table.gradients[j] - &fd[j]).norm() / table.gradients[j].norm().max(1.0);
        worst = worst.max(dev);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{IntegratorChain, LinearSystem, ScalarPolynomial};

    #[test]
    fn exponential_series() {
        let sys = ScalarPolynomial::exponential();
        let c = taylor_flow(&sys, &[1.0], &[], 4).unwrap();
        let expected = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0];
        for (got, want) in c.iter().zip(expected) {
            assert!((got[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_flow() {
        let sys = LinearSystem::new(DMatrix::zeros(3, 3), DMatrix::identity(3, 3));
        let c = taylor_flow(&sys, &[1.0, -2.0, 0.5], &[], 5).unwrap();
        assert_eq!(c[0].as_slice(), &[1.0, -2.0, 0.5]);
        for k in 1..=5 {
            assert_eq!(c[k].norm(), 0.0);
        }
    }

    #[test]
    fn order_zero_is_observation_and_jacobian() {
        let sys = ScalarPolynomial::quadratic();
        let t = lie_table(&sys, &[0.7], &[], 0).unwrap();
        assert_eq!(t.coefficients.len(), 1);
        assert_eq!(t.coefficients[0][0], 0.7);
        assert_eq!(t.gradients[0][(0, 0)], 1.0);
    }

    #[test]
    fn double_integrator_chain() {
        let sys = IntegratorChain::new(2);
        let t = lie_table(&sys, &[1.5, -0.25], &[], 3).unwrap();
        assert_eq!(t.coefficients[0][0], 1.5);
        assert_eq!(t.coefficients[1][0], -0.25);
        assert_eq!(t.coefficients[2][0], 0.0);
        assert_eq!(t.gradients[0].row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(t.gradients[1].row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(t.gradients[2].norm(), 0.0);
    }

    #[test]
    fn quadratic_scalar_lie_derivatives() {
        // ẋ = x², h = x: L^j h = j! x^{j+1}
        let sys = ScalarPolynomial::quadratic();
        let x = 0.8_f64;
        let t = lie_table(&sys, &[x], &[], 4).unwrap();
        let mut fact = 1.0;
        for j in 0..=4 {
            if j > 0 {
                fact *= j as f64;
            }
            let want = fact * x.powi(j as i32 + 1);
            assert!((t.coefficients[j][0] - want).abs() < 1e-12 * want.abs().max(1.0));
            let dwant = fact * (j as f64 + 1.0) * x.powi(j as i32);
            assert!((t.gradients[j][(0, 0)] - dwant).abs() < 1e-12 * dwant.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_check_linear_is_exact() {
        let sys = IntegratorChain::new(2);
        let dev = gradient_check(&sys, &[0.3, 2.0], &[], 4, 1e-3).unwrap();
        assert!(dev < 1e-10, "{dev}");
    }

    #[test]
    fn gradient_check_quadratic() {
        let sys = ScalarPolynomial::quadratic();
        let dev = gradient_check(&sys, &[0.6], &[], 4, 1e-6).unwrap();
        assert!(dev < 1e-5, "{dev}");
    }

    #[test]
    fn rejects_bad_step_and_order() {
        let sys = ScalarPolynomial::quadratic();
        assert!(gradient_check(&sys, &[0.6], &[], 2, 0.0).is_err());
        assert!(matches!(
            lie_table(&sys, &[0.6], &[], MAX_ORDER + 1),
            Err(Error::OrderTooHigh { .. })
        ));
    }

    #[test]
    fn blow_up_reports_order() {
        let sys = ScalarPolynomial::quadratic();
        let err = taylor_flow(&sys, &[1e200], &[], 3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteCoefficient { order } if order >= 1));
    }
}
