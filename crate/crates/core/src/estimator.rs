//! Extended Kalman filter on the relative state and the Gramian precision
//! law.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liealg::SmoothSystem;
use crate::model::{
    observation_jacobian, observe, rk4, rk4_unprojected, Cls, ControlInput, Observation,
    RelativeState, INPUT_DIM, OBS_DIM, STATE_DIM,
};
use crate::noise::{sample_path_with, sigma_factor, NoiseSpec};
use crate::obsv::GramianReport;
use crate::quadrature::gauss_legendre_interval;
use crate::systems::LinearSystem;

/// Table-1 style noise levels and filter timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkfConfig {
    /// Filter step [s].
    pub dt: f64,
    /// Specific-thrust noise variance, both vehicles [(m/s²)²].
    pub thrust_var: f64,
    /// Body-rate noise variance per axis, both vehicles [(rad/s)²].
    pub rate_var: f64,
    /// Range noise variance [m²].
    pub range_var: f64,
    /// Attitude noise variance per rotation axis [rad²].
    pub attitude_var: f64,
    /// Number of independent input-noise draws per filter step.
    #[serde(default = "default_noise_substeps")]
    pub noise_substeps: usize,
    /// Central-difference step for the transition and input Jacobians.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_noise_substeps() -> usize {
    10
}

fn default_fd_step() -> f64 {
    1e-6
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            thrust_var: 0.05,
            rate_var: 1.49e-5,
            range_var: 0.008,
            attitude_var: 3.594e-6,
            noise_substeps: default_noise_substeps(),
            fd_step: default_fd_step(),
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("dt", self.dt),
            ("thrust_var", self.thrust_var),
            ("rate_var", self.rate_var),
            ("range_var", self.range_var),
            ("attitude_var", self.attitude_var),
            ("fd_step", self.fd_step),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("ekf.{name} must be positive, got {v}")));
            }
        }
        if self.noise_substeps == 0 {
            return Err(Error::Config("ekf.noise_substeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Diagonal covariance of the stacked 8-component input noise.
    pub fn input_covariance(&self) -> DMatrix<f64> {
        let t = self.thrust_var;
        let w = self.rate_var;
        DMatrix::from_diagonal(&DVector::from_vec(vec![t, w, w, w, t, w, w, w]))
    }

    /// Measurement covariance of `(½d², q)` at estimated range `range`.
    ///
    /// Range noise maps through `∂(½d²)/∂d = d`; a small rotation `φ` moves
    /// each quaternion component by at most `φ/2`.
    pub fn measurement_covariance(&self, range: f64) -> DMatrix<f64> {
        let q = self.attitude_var / 4.0;
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            range * range * self.range_var,
            q,
            q,
            q,
            q,
        ]))
    }
}

/// Gaussian belief over the relative state.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub mean: RelativeState,
    pub covariance: DMatrix<f64>,
    pub timestamp: f64,
    /// Number of covariance repairs performed so far.
    pub repairs: u32,
}

impl Belief {
    pub fn new(mean: RelativeState, covariance: DMatrix<f64>, timestamp: f64) -> Result<Self> {
        if covariance.nrows() != STATE_DIM || covariance.ncols() != STATE_DIM {
            return Err(Error::Dimension("belief covariance must be 10×10".into()));
        }
        if Cholesky::new(covariance.clone()).is_none() {
            return Err(Error::Precondition("belief covariance must be positive definite".into()));
        }
        Ok(Self {
            mean,
            covariance,
            timestamp,
            repairs: 0,
        })
    }

    /// Standard deviations of the three position components.
    pub fn position_sigma(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.covariance[(i, i)].max(0.0).sqrt())
    }
}

/// Symmetrizes `p` and lifts eigenvalues below a relative floor. Returns
/// whether the floor was needed.
pub fn repair_covariance(p: &mut DMatrix<f64>) -> bool {
    let sym = (&*p + p.transpose()) * 0.5;
    *p = sym;
    let e = p.clone().symmetric_eigen();
    let max = e.eigenvalues.max().max(0.0);
    let floor = 1e-15 * max.max(f64::MIN_POSITIVE);
    if e.eigenvalues.min() >= floor {
        return false;
    }
    let d = e.eigenvalues.map(|v| v.max(floor));
    *p = &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose();
    let sym = (&*p + p.transpose()) * 0.5;
    *p = sym;
    true
}

/// Central-difference Jacobians of one RK4 step with respect to state and
/// input.
pub fn step_jacobians<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    dt: f64,
    step: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let m = u.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + step;
        let plus = rk4_unprojected(sys, &xp, u, dt);
        xp[j] = x[j] - step;
        let minus = rk4_unprojected(sys, &xp, u, dt);
        xp[j] = x[j];
        for i in 0..n {
            a[(i, j)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    let mut up = u.to_vec();
    for j in 0..m {
        up[j] = u[j] + step;
        let plus = rk4_unprojected(sys, x, &up, dt);
        up[j] = u[j] - step;
        let minus = rk4_unprojected(sys, x, &up, dt);
        up[j] = u[j];
        for i in 0..n {
            b[(i, j)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    (a, b)
}

/// Generic covariance prediction `Φ P Φᵀ + B Σᵤ Bᵀ / substeps`. Returns the
/// propagated mean and covariance.
pub fn predict_moments<Sys: SmoothSystem>(
    sys: &Sys,
    mean: &[f64],
    cov: &DMatrix<f64>,
    u: &[f64],
    dt: f64,
    input_cov: &DMatrix<f64>,
    substeps: usize,
    fd_step: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let (phi, b) = step_jacobians(sys, mean, u, dt, fd_step);
    let mut p = &phi * cov * phi.transpose();
    if input_cov.nrows() > 0 && input_cov.iter().any(|v| *v != 0.0) {
        p += &b * input_cov * b.transpose() / substeps as f64;
    }
    (rk4(sys, mean, u, dt), p)
}

/// Time update over one filter step.
pub fn predict(b: &Belief, u: &ControlInput, cfg: &EkfConfig) -> Result<Belief> {
    let (mean, mut cov) = predict_moments(
        &Cls,
        b.mean.to_vector().as_slice(),
        &b.covariance,
        &u.to_array(),
        cfg.dt,
        &cfg.input_covariance(),
        cfg.noise_substeps,
        cfg.fd_step,
    );
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EKF prediction"));
    }
    let mut repairs = b.repairs;
    if repair_covariance(&mut cov) {
        repairs += 1;
        debug!("covariance repaired after prediction at t={}", b.timestamp + cfg.dt);
    }
    Ok(Belief {
        mean: RelativeState::from_slice(&mean),
        covariance: cov,
        timestamp: b.timestamp + cfg.dt,
        repairs,
    })
}

fn invert_spd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    Cholesky::new(sym)
        .map(|c| c.inverse())
        .ok_or(Error::Singular(what))
}

/// Measurement residual with the quaternion sign aligned to the prediction.
pub fn innovation(mean: &RelativeState, y: &Observation) -> DVector<f64> {
    let pred = observe(mean);
    let sign = if y.q_rel.dot(&mean.q) < 0.0 { -1.0 } else { 1.0 };
    let mut z = DVector::zeros(OBS_DIM);
    z[0] = y.half_range_sq - pred.half_range_sq;
    for i in 0..4 {
        z[1 + i] = sign * y.q_rel[i] - pred.q_rel[i];
    }
    z
}

/// Result of a measurement update.
#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub belief: Belief,
    pub innovation: DVector<f64>,
}

/// Information-form update `P̂⁻¹ = P̌⁻¹ + HᵀR⁻¹H`.
pub fn update(b: &Belief, y: &Observation, cfg: &EkfConfig) -> Result<UpdateOutcome> {
    let h = observation_jacobian(&b.mean);
    let h = DMatrix::from_column_slice(OBS_DIM, STATE_DIM, h.as_slice());
    let r = cfg.measurement_covariance(b.mean.range());
    let z = innovation(&b.mean, y);
    let (mean, cov) = information_update(b.mean.to_vector().as_slice(), &b.covariance, &h, &r, &z)?;
    finish_update(b, mean, cov, z)
}

/// Gain-form update `K = P̌Hᵀ(HP̌Hᵀ + R)⁻¹`, kept as a cross-check.
pub fn update_gain_form(b: &Belief, y: &Observation, cfg: &EkfConfig) -> Result<UpdateOutcome> {
    let h = observation_jacobian(&b.mean);
    let h = DMatrix::from_column_slice(OBS_DIM, STATE_DIM, h.as_slice());
    let r = cfg.measurement_covariance(b.mean.range());
    let z = innovation(&b.mean, y);
    let (mean, cov) = gain_update(b.mean.to_vector().as_slice(), &b.covariance, &h, &r, &z)?;
    finish_update(b, mean, cov, z)
}

fn finish_update(b: &Belief, mean: DVector<f64>, mut cov: DMatrix<f64>, z: DVector<f64>) -> Result<UpdateOutcome> {
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EKF update"));
    }
    let mut repairs = b.repairs;
    if repair_covariance(&mut cov) {
        repairs += 1;
        debug!("covariance repaired after update at t={}", b.timestamp);
    }
    let mut state = RelativeState::from_slice(mean.as_slice());
    state.normalize();
    Ok(UpdateOutcome {
        belief: Belief {
            mean: state,
            covariance: cov,
            timestamp: b.timestamp,
            repairs,
        },
        innovation: z,
    })
}

/// Linear-Gaussian update in information form.
pub fn information_update(
    mean: &[f64],
    prior: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r_inv = invert_spd(r, "measurement covariance")?;
    let info = invert_spd(prior, "prior covariance")? + h.transpose() * &r_inv * h;
    let post = invert_spd(&info, "posterior information")?;
    let gain = &post * h.transpose() * &r_inv;
    Ok((DVector::from_column_slice(mean) + gain * z, post))
}

/// Linear-Gaussian update in gain form with the Joseph covariance.
pub fn gain_update(
    mean: &[f64],
    prior: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = h * prior * h.transpose() + r;
    let s_inv = invert_spd(&s, "innovation covariance")?;
    let k = prior * h.transpose() * s_inv;
    let n = prior.nrows();
    let i_kh = DMatrix::identity(n, n) - &k * h;
    let post = &i_kh * prior * i_kh.transpose() + &k * r * k.transpose();
    Ok((DVector::from_column_slice(mean) + k * z, post))
}

/// Posterior of the Gramian precision law with the slack of its eigenvalue
/// bound.
#[derive(Clone, Debug)]
pub struct PrecisionUpdate {
    pub posterior: DMatrix<f64>,
    /// `1/λ_max(P̂) − (λ_min(W)/δt + 1/λ_max(P̌))`, non-negative up to rounding.
    pub bound_slack: f64,
}

/// `P̂ = (W/δt + P̌⁻¹)⁻¹` with the check
/// `1/λ_max(P̂) ≥ λ_min(W)/δt + 1/λ_max(P̌)`.
pub fn stlog_precision_update(
    prior: &DMatrix<f64>,
    w: &GramianReport,
    delta_t: f64,
) -> Result<PrecisionUpdate> {
    precision_update(prior, &w.matrix, delta_t)
}

/// [`stlog_precision_update`] on a bare matrix.
pub fn precision_update(prior: &DMatrix<f64>, w: &DMatrix<f64>, delta_t: f64) -> Result<PrecisionUpdate> {
    if !(delta_t > 0.0) {
        return Err(Error::Precondition(format!("delta_t must be positive, got {delta_t}")));
    }
    if prior.shape() != w.shape() {
        return Err(Error::Dimension("prior and Gramian shapes differ".into()));
    }
    let info = w / delta_t + invert_spd(prior, "prior covariance")?;
    let posterior = invert_spd(&info, "posterior information")?;
    let lam_max_post = posterior.clone().symmetric_eigen().eigenvalues.max();
    let lam_max_prior = prior.clone().symmetric_eigen().eigenvalues.max();
    let lam_min_w = w.clone().symmetric_eigen().eigenvalues.min();
    let lhs = 1.0 / lam_max_post;
    let rhs = lam_min_w / delta_t + 1.0 / lam_max_prior;
    let bound_slack = lhs - rhs;
    if bound_slack < -1e-9 * lhs.abs().max(rhs.abs()) {
        return Err(Error::Consistency(format!(
            "precision bound violated: {lhs} < {rhs}"
        )));
    }
    Ok(PrecisionUpdate {
        posterior,
        bound_slack,
    })
}

/// Monte Carlo check of the initial-condition posterior of a linear system.
#[derive(Clone, Debug)]
pub struct IcPosteriorCheck {
    pub empirical: DMatrix<f64>,
    pub predicted: DMatrix<f64>,
    pub gramian: DMatrix<f64>,
    pub mean_error: DVector<f64>,
    pub trials: usize,
}

impl IcPosteriorCheck {
    /// Largest `|Ê_ij − P_ij| / √(P_ii P_jj)`.
    pub fn max_relative_deviation(&self) -> f64 {
        let n = self.predicted.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let scale = (self.predicted[(i, i)] * self.predicted[(j, j)]).sqrt();
                worst = worst.max((self.empirical[(i, j)] - self.predicted[(i, j)]).abs() / scale);
            }
        }
        worst
    }
}

/// Samples `x₀ ~ N(x*, P̌₀)` and a noise path per trial, forms
/// `x̂ = x* + P̂ b / δt` with `b = ∫ M(t)ᵀΣ⁻¹(y − M(t)x*) dt`, and compares the
/// error covariance with `P̂ = (W/δt + P̌₀⁻¹)⁻¹`.
pub fn ic_posterior_mc(
    sys: &LinearSystem,
    x_star: &DVector<f64>,
    prior: &DMatrix<f64>,
    noise: &NoiseSpec,
    n_trials: usize,
    seed: u64,
) -> Result<IcPosteriorCheck> {
    noise.validate()?;
    let n = sys.state_dim();
    if sys.obs_dim() != noise.dim() {
        return Err(Error::Dimension("noise dimension must match the observation".into()));
    }
    if n_trials < 2 {
        return Err(Error::Precondition("need at least two trials".into()));
    }
    let horizon = noise.horizon;
    let dt_corr = noise.delta_t();
    let sigma_inv = invert_spd(&noise.sigma, "noise covariance")?;
    // Exact for the path's polynomial degree times the response degree.
    let (nodes, weights) = gauss_legendre_interval(noise.n_trunc / 2 + n + 4, horizon);
    let responses: Vec<DMatrix<f64>> = nodes
        .iter()
        .map(|&t| &sys.c * (&sys.a * t).exp())
        .collect();
    let mut w = DMatrix::zeros(n, n);
    for (m, wk) in responses.iter().zip(&weights) {
        w += m.transpose() * &sigma_inv * m * *wk;
    }
    let post = invert_spd(&(&w / dt_corr + invert_spd(prior, "prior covariance")?), "posterior")?;
    let prior_factor: DMatrix<f64> = Cholesky::<f64, Dyn>::new(prior.clone())
        .ok_or_else(|| Error::Precondition("prior must be positive definite".into()))?
        .l();
    let noise_factor = sigma_factor(noise);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let x0 = x_star + &prior_factor * z;
        let path = sample_path_with(noise, &noise_factor, &mut rng);
        let mut b = DVector::zeros(n);
        for ((m, &t), wk) in responses.iter().zip(&nodes).zip(&weights) {
            let y = m * &x0 + path.eval(t)?;
            let resid = y - m * x_star;
            b += m.transpose() * &sigma_inv * resid * *wk;
        }
        let est = x_star + &post * b / dt_corr;
        errors.push(est - &x0);
    }
    let mean_error = errors.iter().fold(DVector::zeros(n), |acc, e| acc + e) / n_trials as f64;
    let mut empirical = DMatrix::zeros(n, n);
    for e in &errors {
        let d = e - &mean_error;
        empirical += &d * d.transpose();
    }
    empirical /= (n_trials - 1) as f64;
    Ok(IcPosteriorCheck {
        empirical,
        predicted: post,
        gramian: w,
        mean_error,
        trials: n_trials,
    })
}

/// Builds the 8-component input noise sample for one substep.
pub fn sample_input_noise<R: rand::Rng>(cfg: &EkfConfig, rng: &mut R) -> [f64; INPUT_DIM] {
    let sd_f = cfg.thrust_var.sqrt();
    let sd_w = cfg.rate_var.sqrt();
    let mut out = [0.0; INPUT_DIM];
    for (i, o) in out.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        *o = z * if i == 0 || i == 4 { sd_f } else { sd_w };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obsv::stlog;
    use crate::systems::IntegratorChain;
    use nalgebra::{Vector3, Vector4};
    use proptest::prelude::*;

    fn quiet() -> EkfConfig {
        EkfConfig {
            thrust_var: 1e-300,
            rate_var: 1e-300,
            ..EkfConfig::default()
        }
    }

    fn belief(x: RelativeState, p: DMatrix<f64>) -> Belief {
        Belief::new(x, p, 0.0).unwrap()
    }

    fn spd(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| { let v: f64 = StandardNormal.sample(&mut rng); v });
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn zero_dynamics_without_noise_keeps_covariance() {
        let sys = LinearSystem::new(DMatrix::zeros(3, 3), DMatrix::identity(3, 3));
        let p = spd(4, 3);
        let (_, cov) = predict_moments(&sys, &[1.0, 2.0, 3.0], &p, &[], 0.1, &DMatrix::zeros(0, 0), 1, 1e-6);
        assert!((&cov - &p).norm() < 1e-9 * p.norm());
    }

    #[test]
    fn linear_system_prediction_is_exact() {
        let sys = IntegratorChain::new(2);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let dt = 0.3;
        let (mean, cov) = predict_moments(&sys, &[1.0, 2.0], &p, &[], dt, &DMatrix::zeros(0, 0), 1, 1e-6);
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        assert!((&cov - &phi * &p * phi.transpose()).norm() < 1e-9);
        assert!((mean[0] - 1.6).abs() < 1e-14);
    }

    #[test]
    fn drift_grows_position_variance() {
        let mut x = RelativeState::hover(Vector3::new(3.0, 1.0, 0.0));
        x.v = Vector3::new(0.5, 0.0, 0.0);
        let p = DMatrix::identity(10, 10) * 0.01;
        let u = ControlInput::from_slice(&[0.0; INPUT_DIM]);
        let b = predict(&belief(x, p.clone()), &u, &quiet()).unwrap();
        let dt = 0.1;
        for i in 0..3 {
            let grown = b.covariance[(i, i)] - p[(i, i)];
            assert!((grown - dt * dt * p[(7 + i, 7 + i)]).abs() < 1e-9, "{grown}");
        }
    }

    #[test]
    fn update_leaves_velocity_block() {
        let q = Vector4::new(0.1, 0.2, -0.1, 0.97).normalize();
        let x = RelativeState::new(Vector3::new(2.0, 1.0, -1.0), q, Vector3::new(0.3, 0.1, 0.0));
        let p = DMatrix::identity(10, 10) * 0.3;
        let mut y = observe(&x);
        y.half_range_sq += 0.1;
        let out = update(&belief(x, p.clone()), &y, &EkfConfig::default()).unwrap();
        let before = p.view((7, 7), (3, 3)).into_owned();
        let after = out.belief.covariance.view((7, 7), (3, 3)).into_owned();
        assert!((before - after).norm() < 1e-12);
        assert!(out.belief.covariance[(3, 3)] < 1e-5);
    }

    #[test]
    fn confident_prior_ignores_measurement() {
        let x = RelativeState::hover(Vector3::new(2.0, 0.0, 1.0));
        let p = DMatrix::identity(10, 10) * 1e-14;
        let mut y = observe(&x);
        y.half_range_sq += 0.5;
        let out = update(&belief(x, p.clone()), &y, &EkfConfig::default()).unwrap();
        assert!((out.belief.mean.r - x.r).norm() < 1e-9);
        assert!((&out.belief.covariance - &p).norm() < 1e-15);
    }

    #[test]
    fn scalar_information_addition() {
        let one = DMatrix::identity(1, 1);
        let (m, p) = information_update(&[0.0], &one, &one, &one, &DVector::from_element(1, 2.0)).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quaternion_sign_is_aligned() {
        let q = Vector4::new(0.0, 0.0, 0.6, 0.8);
        let x = RelativeState::new(Vector3::new(1.0, 2.0, 2.0), q, Vector3::zeros());
        let mut y = observe(&x);
        y.q_rel = -y.q_rel;
        let z = innovation(&x, &y);
        assert!(z.norm() < 1e-15);
    }

    #[test]
    fn precision_law_examples() {
        let one = DMatrix::identity(1, 1);
        let up = precision_update(&one, &one, 1.0).unwrap();
        assert!((up.posterior[(0, 0)] - 0.5).abs() < 1e-15);
        let p = spd(1, 4);
        let up = precision_update(&p, &DMatrix::zeros(4, 4), 0.5).unwrap();
        assert!((&up.posterior - &p).norm() < 1e-10 * p.norm());
        assert!(precision_update(&p, &DMatrix::zeros(4, 4), 0.0).is_err());
    }

    #[test]
    fn precision_update_from_gramian() {
        let sys = IntegratorChain::new(2);
        let w = stlog(&sys, &[0.0, 0.0], &[], 1.0, 1, &DMatrix::identity(1, 1)).unwrap();
        let up = stlog_precision_update(&DMatrix::identity(2, 2), &w, 0.01).unwrap();
        // Equality case: the prior is isotropic.
        assert!(up.bound_slack.abs() < 1e-12);
    }

    #[test]
    fn ic_posterior_small_run() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        );
        let noise = NoiseSpec::new(1.0, 20, 2.0, DMatrix::identity(1, 1) * 0.01).unwrap();
        let prior = DMatrix::identity(2, 2) * 0.05;
        let res = ic_posterior_mc(&sys, &DVector::from_vec(vec![1.0, -0.5]), &prior, &noise, 400, 3).unwrap();
        assert!(res.max_relative_deviation() < 0.25, "{}", res.max_relative_deviation());
    }

    #[test]
    fn ic_posterior_without_information() {
        // h = x₁ with no coupling: the second state keeps its prior.
        let sys = LinearSystem::new(DMatrix::zeros(2, 2), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let noise = NoiseSpec::new(1.0, 10, 2.0, DMatrix::identity(1, 1) * 0.01).unwrap();
        let prior = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3]));
        let res = ic_posterior_mc(&sys, &DVector::zeros(2), &prior, &noise, 50, 1).unwrap();
        assert!((res.predicted[(1, 1)] - 0.3).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn information_and_gain_forms_agree(seed in any::<u64>()) {
            let n = 6;
            let p = spd(seed, n);
            let r = spd(seed ^ 0xabc, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
            let h = DMatrix::from_fn(3, n, |_, _| StandardNormal.sample(&mut rng));
            let z = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let mean = vec![0.5; n];
            let (m1, p1) = information_update(&mean, &p, &h, &r, &z).unwrap();
            let (m2, p2) = gain_update(&mean, &p, &h, &r, &z).unwrap();
            prop_assert!((&p1 - &p2).norm() <= 1e-8 * p2.norm());
            prop_assert!((&m1 - &m2).norm() <= 1e-8 * (1.0 + m2.norm()));
        }

        #[test]
        fn precision_bound_holds(seed in any::<u64>(), dt in 1e-3..1.0f64) {
            let p = spd(seed, 5);
            let w = spd(seed ^ 0x55, 5) * 0.3;
            let up = precision_update(&p, &w, dt).unwrap();
            prop_assert!(up.bound_slack >= -1e-9);
        }
    }
}
