//! Band-limited white noise with a power-law tail, expanded in orthonormal
//! Legendre polynomials on `[0, T]`.
//!
//! A path is `η(t) = Σₙ cₙ eₙ(t)` with `cₙ = χₙ/√N_c` for `n < N_c` and
//! `cₙ = √(aₙ n^{−α}) χₙ` above, `χₙ ~ N(0, Σ)` independent. The basis is
//! orthonormal for `⟨f, g⟩ = (1/T)∫₀ᵀ f g dt`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the noise process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Window length `T` [s].
    pub horizon: f64,
    /// Number of equal-energy components `N_c`.
    pub n_c: usize,
    /// Tail decay exponent.
    pub alpha: f64,
    /// Tail coefficients `a_{N_c}, a_{N_c+1}, …`; the last entry repeats and
    /// an empty list means all ones.
    #[serde(default)]
    pub tail_coeffs: Vec<f64>,
    /// Spatial covariance `Σ`.
    #[serde(with = "crate::matrix_rows")]
    pub sigma: DMatrix<f64>,
    /// Number of sampled components.
    pub n_trunc: usize,
}

impl NoiseSpec {
    /// Spec with unit tail coefficients and `n_trunc = 4·N_c`.
    pub fn new(horizon: f64, n_c: usize, alpha: f64, sigma: DMatrix<f64>) -> Result<Self> {
        let spec = Self {
            horizon,
            n_c,
            alpha,
            tail_coeffs: Vec::new(),
            sigma,
            n_trunc: 4 * n_c,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Correlation timescale `T/N_c`.
    pub fn delta_t(&self) -> f64 {
        self.horizon / self.n_c as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!("noise horizon must be positive, got {}", self.horizon)));
        }
        if self.n_c <= 1 {
            return Err(Error::Config(format!("n_c must exceed 1, got {}", self.n_c)));
        }
        if !(self.alpha > 1.0) {
            return Err(Error::Config(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if self.n_trunc < self.n_c {
            return Err(Error::Config(format!(
                "n_trunc ({}) must be at least n_c ({})",
                self.n_trunc, self.n_c
            )));
        }
        if self.tail_coeffs.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::Config("tail coefficients must be positive and finite".into()));
        }
        if self.sigma.nrows() == 0 || self.sigma.nrows() != self.sigma.ncols() {
            return Err(Error::Config("sigma must be a non-empty square matrix".into()));
        }
        if (&self.sigma - self.sigma.transpose()).norm() > 1e-12 * self.sigma.norm() {
            return Err(Error::Config("sigma must be symmetric".into()));
        }
        if Cholesky::new(self.sigma.clone()).is_none() {
            return Err(Error::Config("sigma must be positive definite".into()));
        }
        Ok(())
    }

    pub fn tail_coeff(&self, n: usize) -> f64 {
        debug_assert!(n >= self.n_c);
        match self.tail_coeffs.len() {
            0 => 1.0,
            len => self.tail_coeffs[(n - self.n_c).min(len - 1)],
        }
    }

    /// Variance factor multiplying `Σ` for component `n`.
    pub fn band_weight(&self, n: usize) -> f64 {
        if n < self.n_c {
            1.0 / self.n_c as f64
        } else {
            self.tail_coeff(n) * (n as f64).powf(-self.alpha)
        }
    }
}

/// The orthonormal Legendre functions `e₀..=eₙ` on `[0, T]`.
#[derive(Clone, Copy, Debug)]
pub struct LegendreBasis {
    pub horizon: f64,
    pub order: usize,
}

impl LegendreBasis {
    /// Writes `e₀(t)..=e_order(t)` into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let s = 2.0 * t / self.horizon - 1.0;
        let mut p0 = 1.0;
        let mut p1 = s;
        for (n, o) in out.iter_mut().enumerate().take(self.order + 1) {
            let pn = match n {
                0 => 1.0,
                1 => s,
                _ => {
                    let nf = n as f64;
                    let p2 = ((2.0 * nf - 1.0) * s * p1 - (nf - 1.0) * p0) / nf;
                    p0 = p1;
                    p1 = p2;
                    p2
                }
            };
            *o = (2.0 * n as f64 + 1.0).sqrt() * pn;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.order + 1];
        self.eval_into(t, &mut out);
        out
    }
}

pub fn legendre_basis(horizon: f64, order: usize) -> LegendreBasis {
    LegendreBasis { horizon, order }
}

/// `E[η(t)ηᵀ(t)] = c(t)·Σ`; returns `c(t)`.
pub fn pointwise_variance_factor(spec: &NoiseSpec, t: f64) -> f64 {
    let e = legendre_basis(spec.horizon, spec.n_trunc.saturating_sub(1)).eval(t);
    e.iter()
        .enumerate()
        .map(|(n, en)| spec.band_weight(n) * en * en)
        .sum()
}

/// One sampled noise path.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    pub horizon: f64,
    /// Entry `n` is the Legendre coefficient `cₙ`.
    pub coefficients: Vec<DVector<f64>>,
}

impl NoisePath {
    /// `η(t)` for `t ∈ [0, T]`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Precondition(format!(
                "noise path evaluated at {t} outside [0, {}]",
                self.horizon
            )));
        }
        let dim = self.coefficients.first().map_or(0, |c| c.len());
        let basis = legendre_basis(self.horizon, self.coefficients.len().saturating_sub(1));
        let e = basis.eval(t);
        let mut out = DVector::zeros(dim);
        for (c, en) in self.coefficients.iter().zip(&e) {
            out.axpy(*en, c, 1.0);
        }
        Ok(out)
    }

    /// `(1/T)∫₀ᵀ ‖η‖² dt`, by Parseval.
    pub fn mean_square(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm_squared()).sum()
    }
}

fn sqrt_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(sigma.clone()) {
        return ch.l();
    }
    let e = sigma.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Draws a path, deterministic in `seed`.
pub fn sample_path(spec: &NoiseSpec, seed: u64) -> Result<NoisePath> {
    spec.validate()?;
    Ok(sample_path_unchecked(spec, seed))
}

/// Same as [`sample_path`] but accepts a positive-semidefinite `Σ`.
pub fn sample_path_unchecked(spec: &NoiseSpec, seed: u64) -> NoisePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_path_with(spec, &sqrt_factor(&spec.sigma), &mut rng)
}

/// Draws a path from an existing stream given a square-root factor of `Σ`.
pub fn sample_path_with<R: rand::Rng>(spec: &NoiseSpec, factor: &DMatrix<f64>, rng: &mut R) -> NoisePath {
    let dim = spec.dim();
    let mut z = DVector::zeros(dim);
    let coefficients = (0..spec.n_trunc)
        .map(|n| {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            factor * &z * spec.band_weight(n).sqrt()
        })
        .collect();
    NoisePath {
        horizon: spec.horizon,
        coefficients,
    }
}

/// Square-root factor of `Σ` (Cholesky when definite).
pub fn sigma_factor(spec: &NoiseSpec) -> DMatrix<f64> {
    sqrt_factor(&spec.sigma)
}

/// Covariance-operator eigenvalues on Legendre component `n`, one per
/// eigenvalue of `Σ`, in descending order.
pub fn covariance_eigs(spec: &NoiseSpec, n: usize) -> Vec<f64> {
    let mut s: Vec<f64> = spec.sigma.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let w = spec.band_weight(n);
    s.into_iter().map(|v| v * w).collect()
}

/// Total variance captured by components `0..n_trunc`: `tr Σ · Σₙ wₙ`.
pub fn truncated_trace(spec: &NoiseSpec, n_trunc: usize) -> f64 {
    spec.sigma.trace() * (0..n_trunc).map(|n| spec.band_weight(n)).sum::<f64>()
}

/// Empirical against predicted variance of each Legendre component.
#[derive(Clone, Debug, Serialize)]
pub struct SpectrumCheck {
    pub paths: usize,
    /// `expected[n][i] = wₙ Σᵢᵢ`.
    pub expected: Vec<Vec<f64>>,
    pub empirical: Vec<Vec<f64>>,
}

impl SpectrumCheck {
    fn deviations(&self, band: bool, n_c: usize) -> impl Iterator<Item = f64> + '_ {
        self.expected
            .iter()
            .zip(&self.empirical)
            .enumerate()
            .filter(move |(n, _)| (*n < n_c) == band)
            .flat_map(|(_, (e, m))| e.iter().zip(m).filter(|(e, _)| **e > 0.0).map(|(e, m)| (m / e - 1.0).abs()))
    }

    pub fn max_band_deviation(&self, n_c: usize) -> f64 {
        self.deviations(true, n_c).fold(0.0, f64::max)
    }

    pub fn max_tail_deviation(&self, n_c: usize) -> f64 {
        self.deviations(false, n_c).fold(0.0, f64::max)
    }
}

/// Samples `paths` paths, projects each back onto the basis by Gauss–Legendre
/// quadrature and compares the component variances with the spec.
pub fn spectrum_check(spec: &NoiseSpec, paths: usize, seed: u64) -> Result<SpectrumCheck> {
    spec.validate()?;
    if paths < 2 {
        return Err(Error::Precondition("spectrum check needs at least two paths".into()));
    }
    let n = spec.n_trunc;
    let dim = spec.dim();
    let (nodes, weights) = crate::quadrature::gauss_legendre_interval(n, spec.horizon);
    let basis = legendre_basis(spec.horizon, n - 1);
    let e = DMatrix::from_fn(nodes.len(), n, |q, k| basis.eval(nodes[q])[k]);
    let ew = DMatrix::from_fn(n, nodes.len(), |k, q| e[(q, k)] * weights[q] / spec.horizon);
    let factor = sqrt_factor(&spec.sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum_sq = DMatrix::<f64>::zeros(n, dim);
    for _ in 0..paths {
        let path = sample_path_with(spec, &factor, &mut rng);
        let coeffs = DMatrix::from_fn(n, dim, |k, i| path.coefficients[k][i]);
        let values = &e * coeffs;
        let projected = &ew * values;
        sum_sq += projected.map(|v| v * v);
    }
    let expected = (0..n)
        .map(|k| (0..dim).map(|i| spec.band_weight(k) * spec.sigma[(i, i)]).collect())
        .collect();
    let empirical = (0..n)
        .map(|k| (0..dim).map(|i| sum_sq[(k, i)] / paths as f64).collect())
        .collect();
    Ok(SpectrumCheck { paths, expected, empirical })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_legendre_interval;
    use proptest::prelude::*;

    fn spec_eye(dim: usize, n_c: usize) -> NoiseSpec {
        NoiseSpec::new(1.0, n_c, 2.0, DMatrix::identity(dim, dim)).unwrap()
    }

    #[test]
    fn first_basis_functions() {
        let b = legendre_basis(2.0, 2);
        for &t in &[0.0, 0.3, 1.0, 1.7, 2.0] {
            let e = b.eval(t);
            assert_eq!(e[0], 1.0);
            assert!((e[1] - 3f64.sqrt() * (t - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn orthonormal_under_quadrature() {
        let t = 3.0;
        let b = legendre_basis(t, 12);
        let (nodes, weights) = gauss_legendre_interval(16, t);
        let vals: Vec<Vec<f64>> = nodes.iter().map(|&x| b.eval(x)).collect();
        for m in 0..=12 {
            for n in 0..=12 {
                let ip: f64 = vals.iter().zip(&weights).map(|(e, w)| w * e[m] * e[n]).sum::<f64>() / t;
                let want = if m == n { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-10, "m={m} n={n} ip={ip}");
            }
        }
    }

    #[test]
    fn covariance_eig_examples() {
        let s = spec_eye(3, 10);
        assert!(covariance_eigs(&s, 3).iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!(covariance_eigs(&s, 20).iter().all(|&v| (v - 0.0025).abs() < 1e-15));
        let s = NoiseSpec::new(1.0, 5, 2.0, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))).unwrap();
        let e = covariance_eigs(&s, 0);
        assert!((e[0] - 0.4).abs() < 1e-15 && (e[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_covariance_gives_zero_path() {
        let mut s = spec_eye(2, 4);
        s.sigma = DMatrix::zeros(2, 2);
        assert!(sample_path(&s, 1).is_err());
        let p = sample_path_unchecked(&s, 1);
        assert_eq!(p.mean_square(), 0.0);
        assert_eq!(p.eval(0.5).unwrap().norm(), 0.0);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(NoiseSpec::new(1.0, 1, 2.0, DMatrix::identity(1, 1)).is_err());
        assert!(NoiseSpec::new(1.0, 4, 1.0, DMatrix::identity(1, 1)).is_err());
        assert!(NoiseSpec::new(0.0, 4, 2.0, DMatrix::identity(1, 1)).is_err());
        assert!(NoiseSpec::new(1.0, 4, 2.0, -DMatrix::identity(1, 1)).is_err());
        let mut s = spec_eye(1, 4);
        s.n_trunc = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn evaluation_outside_window_fails() {
        let p = sample_path(&spec_eye(1, 4), 3).unwrap();
        assert!(p.eval(1.5).is_err());
        assert!(p.eval(-0.1).is_err());
    }

    #[test]
    fn parseval_matches_quadrature() {
        let s = spec_eye(2, 6);
        let p = sample_path(&s, 11).unwrap();
        let (nodes, weights) = gauss_legendre_interval(40, 1.0);
        let q: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&t, w)| w * p.eval(t).unwrap().norm_squared())
            .sum();
        assert!((q - p.mean_square()).abs() < 1e-10 * p.mean_square());
    }

    #[test]
    fn tail_sum_converges() {
        let s = spec_eye(1, 10);
        let mut prev = truncated_trace(&s, 40);
        let mut prev_gap = f64::INFINITY;
        for k in 1..6 {
            let cur = truncated_trace(&s, 40 << k);
            let gap = cur - prev;
            assert!(gap >= 0.0 && gap < prev_gap);
            prev = cur;
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }

    #[test]
    fn mean_square_concentrates() {
        let s = spec_eye(2, 20);
        let mean: f64 = (0..400).map(|k| sample_path(&s, k).unwrap().mean_square()).sum::<f64>() / 400.0;
        let want = truncated_trace(&s, s.n_trunc);
        assert!((mean - want).abs() < 0.05 * want, "{mean} vs {want}");
    }

    proptest! {
        #[test]
        fn same_seed_same_path(seed in any::<u64>()) {
            let s = spec_eye(2, 5);
            let a = sample_path(&s, seed).unwrap();
            let b = sample_path(&s, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
    #[test]
    fn pointwise_variance_averages_to_total_weight() {
        let spec = NoiseSpec::new(2.0, 8, 2.0, DMatrix::identity(1, 1)).unwrap();
        let total: f64 = (0..spec.n_trunc).map(|n| spec.band_weight(n)).sum();
        let m = 20_000;
        let mean = (0..m)
            .map(|i| pointwise_variance_factor(&spec, spec.horizon * (i as f64 + 0.5) / m as f64))
            .sum::<f64>()
            / m as f64;
        assert!((mean - total).abs() < 1e-3 * total, "{mean} vs {total}");
    }

    #[test]
    fn spectrum_matches_weights() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let spec = NoiseSpec { n_trunc: 24, ..NoiseSpec::new(1.5, 8, 1.5, sigma).unwrap() };
        let check = spectrum_check(&spec, 4000, 3).unwrap();
        assert!(check.max_band_deviation(8) < 0.1, "{}", check.max_band_deviation(8));
        assert!(check.max_tail_deviation(8) < 0.1, "{}", check.max_tail_deviation(8));
        assert!(spectrum_check(&spec, 1, 0).is_err());
    }

}
