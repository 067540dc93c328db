//! Relative-motion model of a leader/follower quadrotor pair.
//!
//! State layout is `x = [r, q, v]` (10 components): relative position of the
//! leader in the follower frame, the follower-to-leader relative quaternion
//! with vector part first and scalar last, and the relative velocity in the
//! follower frame. Input layout is `u = [fˡ, ωˡ, fᶠ, ωᶠ]` (8 components).
//!
//! Transport terms `r×ωᶠ` and `v×ωᶠ` are driven by the follower body rate and
//! the quaternion rate carries the usual ½ factor, `q̇ = ½ q⊗ωˡ − ½ ωᶠ⊗q`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liealg::{Scalar, SmoothSystem};

pub const STATE_DIM: usize = 10;
pub const INPUT_DIM: usize = 8;
pub const OBS_DIM: usize = 5;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;
pub type ObsVector = SVector<f64, OBS_DIM>;

/// Tolerance on ‖q‖ accepted by [`rot_mat`].
pub const UNIT_QUAT_TOL: f64 = 1e-6;

/// Relative state of the follower with respect to the leader.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelativeState {
    /// Leader position relative to the follower, follower frame [m].
    pub r: Vector3<f64>,
    /// Relative orientation `(x, y, z, w)`.
    pub q: Vector4<f64>,
    /// Relative velocity, follower frame [m/s].
    pub v: Vector3<f64>,
}

impl RelativeState {
    pub fn new(r: Vector3<f64>, q: Vector4<f64>, v: Vector3<f64>) -> Self {
        Self { r, q, v }
    }

    /// Leader hovering at `r` with aligned attitude and zero relative velocity.
    pub fn hover(r: Vector3<f64>) -> Self {
        Self::new(r, identity_quat(), Vector3::zeros())
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.r);
        x.fixed_rows_mut::<4>(3).copy_from(&self.q);
        x.fixed_rows_mut::<3>(7).copy_from(&self.v);
        x
    }

    pub fn from_slice(x: &[f64]) -> Self {
        assert_eq!(x.len(), STATE_DIM);
        Self {
            r: Vector3::new(x[0], x[1], x[2]),
            q: Vector4::new(x[3], x[4], x[5], x[6]),
            v: Vector3::new(x[7], x[8], x[9]),
        }
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self::from_slice(x.as_slice())
    }

    pub fn range(&self) -> f64 {
        self.r.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Rescales `q` to unit norm.
    pub fn normalize(&mut self) {
        let n = self.q.norm();
        if n > 0.0 {
            self.q /= n;
        }
    }
}

/// Stacked leader and follower inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlInput {
    /// Leader specific thrust [m/s²].
    pub f_l: f64,
    /// Leader body rate [rad/s].
    pub w_l: Vector3<f64>,
    /// Follower specific thrust [m/s²].
    pub f_f: f64,
    /// Follower body rate [rad/s].
    pub w_f: Vector3<f64>,
}

impl ControlInput {
    /// Both vehicles at the same thrust, no rotation.
    pub fn trim(thrust: f64) -> Self {
        Self {
            f_l: thrust,
            w_l: Vector3::zeros(),
            f_f: thrust,
            w_f: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> InputVector {
        InputVector::from_column_slice(&self.to_array())
    }

    pub fn to_array(&self) -> [f64; INPUT_DIM] {
        [
            self.f_l, self.w_l.x, self.w_l.y, self.w_l.z, self.f_f, self.w_f.x, self.w_f.y,
            self.w_f.z,
        ]
    }

    pub fn from_slice(u: &[f64]) -> Self {
        assert_eq!(u.len(), INPUT_DIM);
        Self {
            f_l: u[0],
            w_l: Vector3::new(u[1], u[2], u[3]),
            f_f: u[4],
            w_f: Vector3::new(u[5], u[6], u[7]),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.f_l > 0.0 && self.f_f > 0.0
    }
}

/// Half squared range and relative quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub half_range_sq: f64,
    pub q_rel: Vector4<f64>,
}

impl Observation {
    pub fn to_vector(&self) -> ObsVector {
        ObsVector::new(
            self.half_range_sq,
            self.q_rel[0],
            self.q_rel[1],
            self.q_rel[2],
            self.q_rel[3],
        )
    }
}

pub fn identity_quat() -> Vector4<f64> {
    Vector4::new(0.0, 0.0, 0.0, 1.0)
}

/// Skew-symmetric matrix with `cross_mat(a)·b = a × b`.
pub fn cross_mat(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Pure imaginary quaternion `(a, 0)`.
pub fn pure_imag(a: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(a.x, a.y, a.z, 0.0)
}

/// Hamilton product in `(x, y, z, w)` layout.
pub fn quat_mul(q: &Vector4<f64>, p: &Vector4<f64>) -> Vector4<f64> {
    let qv = q.xyz();
    let pv = p.xyz();
    let v = pv * q.w + qv.cross(&pv) + qv * p.w;
    let w = q.w * p.w - qv.dot(&pv);
    Vector4::new(v.x, v.y, v.z, w)
}

/// Quaternion conjugate.
pub fn quat_conj(q: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(-q.x, -q.y, -q.z, q.w)
}

/// Unit quaternion from a rotation vector.
pub fn quat_exp(phi: &Vector3<f64>) -> Vector4<f64> {
    let angle = phi.norm();
    if angle < 1e-12 {
        let mut q = Vector4::new(0.5 * phi.x, 0.5 * phi.y, 0.5 * phi.z, 1.0);
        q /= q.norm();
        return q;
    }
    let s = (0.5 * angle).sin() / angle;
    Vector4::new(phi.x * s, phi.y * s, phi.z * s, (0.5 * angle).cos())
}

/// `R(q) = 1 + 2 q₄ [q]× + 2 [q]×²` for a unit quaternion.
pub fn rot_mat(q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if (n - 1.0).abs() > UNIT_QUAT_TOL {
        return Err(Error::Precondition(format!(
            "rotation matrix requires a unit quaternion, got norm {n}"
        )));
    }
    Ok(rot_mat_unchecked(q))
}

/// The same polynomial map without the unit-norm check, used where the four
/// quaternion components are treated as free coordinates.
pub fn rot_mat_free(q: &Vector4<f64>) -> Matrix3<f64> {
    rot_mat_unchecked(q)
}

fn rot_mat_unchecked(q: &Vector4<f64>) -> Matrix3<f64> {
    let k = cross_mat(&q.xyz());
    Matrix3::identity() + k * (2.0 * q.w) + k * k * 2.0
}

/// `J±(q) = [q₄·1 ± [q]×; −qᵀ]`, 4×3.
pub fn j_pm(q: &Vector4<f64>, plus: bool) -> SMatrix<f64, 4, 3> {
    let k = cross_mat(&q.xyz());
    let top = if plus {
        Matrix3::identity() * q.w + k
    } else {
        Matrix3::identity() * q.w - k
    };
    let mut j = SMatrix::<f64, 4, 3>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&top);
    j[(3, 0)] = -q.x;
    j[(3, 1)] = -q.y;
    j[(3, 2)] = -q.z;
    j
}

/// Jacobian of `R(q)·e₃` with respect to the four quaternion components,
/// treating them as unconstrained coordinates. 3×4.
pub fn thrust_axis_jacobian(q: &Vector4<f64>) -> SMatrix<f64, 3, 4> {
    let (x, y, z, w) = (q.x, q.y, q.z, q.w);
    // R(q)e₃ = (2wy + 2xz, −2wx + 2yz, 1 − 2x² − 2y²)
    SMatrix::<f64, 3, 4>::new(
        2.0 * z, 2.0 * w, 2.0 * x, 2.0 * y, //
        -2.0 * w, 2.0 * z, 2.0 * y, -2.0 * x, //
        -4.0 * x, -4.0 * y, 0.0, 0.0,
    )
}

/// The relative-motion model as a [`SmoothSystem`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Cls;

#[inline]
fn cross<S: Scalar>(a: [S; 3], w: [S; 3]) -> [S; 3] {
    [
        a[1] * w[2] - a[2] * w[1],
        a[2] * w[0] - a[0] * w[2],
        a[0] * w[1] - a[1] * w[0],
    ]
}

impl SmoothSystem for Cls {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn input_dim(&self) -> usize {
        INPUT_DIM
    }
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn dynamics<S: Scalar>(&self, x: &[S], u: &[S], out: &mut [S]) {
        let r = [x[0], x[1], x[2]];
        let qv = [x[3], x[4], x[5]];
        let qw = x[6];
        let v = [x[7], x[8], x[9]];
        let f_l = u[0];
        let w_l = [u[1], u[2], u[3]];
        let f_f = u[4];
        let w_f = [u[5], u[6], u[7]];

        let r_x_wf = cross(r, w_f);
        for i in 0..3 {
            out[i] = v[i] + r_x_wf[i];
        }

        // q̇ = ½ J⁺(q) ωˡ − ½ J⁻(q) ωᶠ
        let qv_x_wl = cross(qv, w_l);
        let qv_x_wf = cross(qv, w_f);
        for i in 0..3 {
            out[3 + i] = (qw * (w_l[i] - w_f[i]) + qv_x_wl[i] + qv_x_wf[i]) * 0.5;
        }
        let mut dot_l = S::zero();
        let mut dot_f = S::zero();
        for i in 0..3 {
            dot_l = dot_l + qv[i] * w_l[i];
            dot_f = dot_f + qv[i] * w_f[i];
        }
        out[6] = (dot_f - dot_l) * 0.5;

        // v̇ = v × ωᶠ + fˡ R(q) e₃ − fᶠ e₃
        let v_x_wf = cross(v, w_f);
        let two_wq = [qw * qv[1] * 2.0, qw * qv[0] * 2.0];
        let axis = [
            two_wq[0] + qv[0] * qv[2] * 2.0,
            qv[1] * qv[2] * 2.0 - two_wq[1],
            S::from_f64(1.0) - (qv[0] * qv[0] + qv[1] * qv[1]) * 2.0,
        ];
        for i in 0..3 {
            out[7 + i] = v_x_wf[i] + axis[i] * f_l;
        }
        out[9] = out[9] - f_f;
    }

    fn observation<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) * 0.5;
        out[1..5].copy_from_slice(&x[3..7]);
    }

    fn project(&self, x: &mut [f64]) {
        let n = (x[3] * x[3] + x[4] * x[4] + x[5] * x[5] + x[6] * x[6]).sqrt();
        if n > 0.0 {
            for c in &mut x[3..7] {
                *c /= n;
            }
        }
    }
}

/// Continuous-time relative dynamics `ẋ = f(x, u)`.
pub fn dynamics(x: &RelativeState, u: &ControlInput) -> StateVector {
    let xv = x.to_vector();
    let mut out = [0.0; STATE_DIM];
    Cls.dynamics(xv.as_slice(), &u.to_array(), &mut out);
    StateVector::from_column_slice(&out)
}

/// Control-affine vector fields `(f₀, f₁, f₂, f₃, f₄)` at `x`, with `f₂`,
/// `f₄` as 10×3 blocks.
pub struct AffineFields {
    pub f0: StateVector,
    pub f1: StateVector,
    pub f2: SMatrix<f64, STATE_DIM, 3>,
    pub f3: StateVector,
    pub f4: SMatrix<f64, STATE_DIM, 3>,
}

pub fn affine_fields(x: &RelativeState) -> AffineFields {
    let mut f0 = StateVector::zeros();
    f0.fixed_rows_mut::<3>(0).copy_from(&x.v);
    let mut f1 = StateVector::zeros();
    f1.fixed_rows_mut::<3>(7)
        .copy_from(&(rot_mat_unchecked(&x.q) * Vector3::z()));
    let mut f2 = SMatrix::<f64, STATE_DIM, 3>::zeros();
    f2.fixed_view_mut::<4, 3>(3, 0).copy_from(&(j_pm(&x.q, true) * 0.5));
    let mut f3 = StateVector::zeros();
    f3[9] = -1.0;
    let mut f4 = SMatrix::<f64, STATE_DIM, 3>::zeros();
    f4.fixed_view_mut::<3, 3>(0, 0).copy_from(&cross_mat(&x.r));
    f4.fixed_view_mut::<4, 3>(3, 0)
        .copy_from(&(j_pm(&x.q, false) * -0.5));
    f4.fixed_view_mut::<3, 3>(7, 0).copy_from(&cross_mat(&x.v));
    AffineFields { f0, f1, f2, f3, f4 }
}

/// `f₀ + f₁fˡ + f₂ωˡ + f₃fᶠ + f₄ωᶠ`.
pub fn dynamics_affine(x: &RelativeState, u: &ControlInput) -> StateVector {
    let a = affine_fields(x);
    a.f0 + a.f1 * u.f_l + a.f2 * u.w_l + a.f3 * u.f_f + a.f4 * u.w_f
}

/// One classical RK4 step of any [`SmoothSystem`], followed by its
/// projection hook.
pub fn rk4<Sys: SmoothSystem>(sys: &Sys, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    let mut out = rk4_unprojected(sys, x, u, dt);
    sys.project(&mut out);
    out
}

/// RK4 step in the ambient coordinates, without projection.
pub fn rk4_unprojected<Sys: SmoothSystem>(sys: &Sys, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.dynamics(x, u, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    sys.dynamics(&tmp, u, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    sys.dynamics(&tmp, u, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    sys.dynamics(&tmp, u, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// RK4 step of the relative dynamics with quaternion renormalization.
pub fn step_rk4(x: &RelativeState, u: &ControlInput, dt: f64) -> Result<RelativeState> {
    if !(dt > 0.0) {
        return Err(Error::Precondition(format!("dt must be positive, got {dt}")));
    }
    let next = rk4(&Cls, x.to_vector().as_slice(), &u.to_array(), dt);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("RK4 step"));
    }
    Ok(RelativeState::from_slice(&next))
}

/// `h(x) = (½‖r‖², q)`.
pub fn observe(x: &RelativeState) -> Observation {
    Observation {
        half_range_sq: 0.5 * x.r.norm_squared(),
        q_rel: x.q,
    }
}

/// Observation Jacobian `[[rᵀ, 0, 0], [0, I₄, 0]]`.
pub fn observation_jacobian(x: &RelativeState) -> SMatrix<f64, OBS_DIM, STATE_DIM> {
    let mut h = SMatrix::<f64, OBS_DIM, STATE_DIM>::zeros();
    for i in 0..3 {
        h[(0, i)] = x.r[i];
    }
    for i in 0..4 {
        h[(1 + i, 3 + i)] = 1.0;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liealg::lie_table;
    use approx_eq::close;
    use proptest::prelude::*;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn unit_quat(a: f64, b: f64, c: f64, d: f64) -> Vector4<f64> {
        let q = Vector4::new(a, b, c, d);
        q / q.norm()
    }

    /// Rodrigues' formula, written independently of `rot_mat`.
    fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
    }

    #[test]
    fn identity_rotation() {
        let r = rot_mat(&identity_quat()).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = rot_mat(&Vector4::new(0.0, 0.0, h, h)).unwrap();
        let e2 = r * Vector3::x();
        assert!((e2 - Vector3::y()).norm() < 1e-12);
        let oracle = rodrigues(Vector3::z(), std::f64::consts::FRAC_PI_2);
        assert!((r - oracle).norm() < 1e-12);
    }

    #[test]
    fn rot_mat_rejects_non_unit() {
        assert!(matches!(
            rot_mat(&Vector4::new(0.0, 0.0, 0.0, 2.0)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn cross_mat_annihilates_own_vector() {
        let a = Vector3::new(0.3, -1.2, 2.5);
        assert_eq!(cross_mat(&a) * a, Vector3::zeros());
        let b = Vector3::new(1.0, 0.5, -0.25);
        assert!((cross_mat(&a) * b - a.cross(&b)).norm() < 1e-15);
    }

    #[test]
    fn hover_is_equilibrium() {
        let x = RelativeState::hover(Vector3::new(3.0, 0.0, 0.0));
        let u = ControlInput::trim(9.81);
        assert_eq!(dynamics(&x, &u), StateVector::zeros());
        let next = step_rk4(&x, &u, 0.1).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn drift_only() {
        let mut x = RelativeState::hover(Vector3::new(1.0, 2.0, 3.0));
        x.v = Vector3::new(0.5, -0.25, 1.0);
        let mut u = ControlInput::trim(0.0);
        u.f_l = 0.0;
        let d = dynamics(&x, &u);
        assert_eq!(d.fixed_rows::<3>(0).into_owned(), x.v);
        assert_eq!(d.fixed_rows::<7>(3).norm(), 0.0);
        let next = step_rk4(&x, &u, 0.3).unwrap();
        assert!((next.r - (x.r + x.v * 0.3)).norm() < 1e-15);
    }

    #[test]
    fn observe_values_and_jacobian() {
        let x = RelativeState::hover(Vector3::zeros());
        assert_eq!(observe(&x).half_range_sq, 0.0);
        let x = RelativeState::hover(Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(observe(&x).half_range_sq, 12.5);

        let x = RelativeState::new(
            Vector3::new(1.0, -2.0, 0.5),
            unit_quat(0.1, 0.2, -0.3, 0.9),
            Vector3::new(0.3, 0.1, -0.2),
        );
        let t = lie_table(&Cls, x.to_vector().as_slice(), &ControlInput::trim(9.0).to_array(), 0)
            .unwrap();
        let h = observation_jacobian(&x);
        for i in 0..OBS_DIM {
            for j in 0..STATE_DIM {
                assert_eq!(t.gradients[0][(i, j)], h[(i, j)]);
            }
        }
    }

    #[test]
    fn richardson_ratio_near_sixteen() {
        let x = RelativeState::new(
            Vector3::new(2.0, -1.0, 0.5),
            unit_quat(0.2, -0.1, 0.3, 0.9),
            Vector3::new(0.4, 0.3, -0.2),
        );
        let u = ControlInput {
            f_l: 9.5,
            w_l: Vector3::new(0.3, -0.2, 0.5),
            f_f: 10.2,
            w_f: Vector3::new(-0.4, 0.6, 0.2),
        };
        // Reference: many small steps.
        let reference = |t: f64| {
            let mut s = x;
            let m = 4096;
            for _ in 0..m {
                s = step_rk4(&s, &u, t / m as f64).unwrap();
            }
            s.to_vector()
        };
        let single = |t: f64, k: usize| {
            let mut s = x;
            for _ in 0..k {
                s = step_rk4(&s, &u, t / k as f64).unwrap();
            }
            s.to_vector()
        };
        // Global error ratio between h and h/2 over a fixed span.
        let span = 0.8;
        let e1 = (single(span, 8) - reference(span)).norm();
        let e2 = (single(span, 16) - reference(span)).norm();
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    fn arb_state() -> impl Strategy<Value = RelativeState> {
        (
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform4(-1.0..1.0f64),
            prop::array::uniform3(-2.0..2.0f64),
        )
            .prop_filter("non-degenerate quaternion", |(_, q, _)| {
                q.iter().map(|c| c * c).sum::<f64>() > 0.05
            })
            .prop_map(|(r, q, v)| {
                let q = Vector4::from(q);
                RelativeState::new(Vector3::from(r), q / q.norm(), Vector3::from(v))
            })
    }

    fn arb_input() -> impl Strategy<Value = ControlInput> {
        (0.5..20.0f64, prop::array::uniform3(-1.0..1.0f64), 0.5..20.0f64, prop::array::uniform3(-1.0..1.0f64))
            .prop_map(|(f_l, w_l, f_f, w_f)| ControlInput {
                f_l,
                w_l: Vector3::from(w_l),
                f_f,
                w_f: Vector3::from(w_f),
            })
    }

    proptest! {
        #[test]
        fn affine_form_matches_quaternion_products(x in arb_state(), u in arb_input()) {
            // Quaternion-product transcription of the kinematics.
            let qdot = quat_mul(&x.q, &pure_imag(&u.w_l)) * 0.5
                - quat_mul(&pure_imag(&u.w_f), &x.q) * 0.5;
            let rdot = x.v + cross_mat(&x.r) * u.w_f;
            let vdot = cross_mat(&x.v) * u.w_f
                + rot_mat(&x.q).unwrap() * Vector3::z() * u.f_l
                - Vector3::z() * u.f_f;
            let mut direct = StateVector::zeros();
            direct.fixed_rows_mut::<3>(0).copy_from(&rdot);
            direct.fixed_rows_mut::<4>(3).copy_from(&qdot);
            direct.fixed_rows_mut::<3>(7).copy_from(&vdot);

            let generic = dynamics(&x, &u);
            let affine = dynamics_affine(&x, &u);
            prop_assert!((generic - direct).norm() < 1e-12);
            prop_assert!((affine - direct).norm() < 1e-12);
        }

        #[test]
        fn dynamics_affine_in_input(x in arb_state(), a in arb_input(), b in arb_input()) {
            let sum = ControlInput::from_slice((a.to_vector() + b.to_vector()).as_slice());
            let zero = ControlInput::from_slice(&[0.0; INPUT_DIM]);
            let lhs = dynamics(&x, &sum) - dynamics(&x, &a) - dynamics(&x, &b) + dynamics(&x, &zero);
            prop_assert!(lhs.norm() < 1e-10);
        }

        #[test]
        fn rotation_composes(p in arb_state(), q in arb_state()) {
            let lhs = rot_mat(&quat_mul(&q.q, &p.q)).unwrap();
            let rhs = rot_mat(&q.q).unwrap() * rot_mat(&p.q).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-12);
            prop_assert!(close(lhs.determinant(), 1.0, 1e-12));
            prop_assert!((lhs.transpose() * lhs - Matrix3::identity()).norm() < 1e-12);
        }

        #[test]
        fn rk4_keeps_unit_quaternion(x in arb_state(), u in arb_input(), dt in 0.001..0.2f64) {
            let next = step_rk4(&x, &u, dt).unwrap();
            prop_assert!((next.q.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn thrust_axis_jacobian_matches_dual_numbers(x in arb_state()) {
            let j = thrust_axis_jacobian(&x.q);
            let h = 1e-6;
            for c in 0..4 {
                let mut qp = x.q; qp[c] += h;
                let mut qm = x.q; qm[c] -= h;
                let col = (rot_mat_unchecked(&qp) - rot_mat_unchecked(&qm)) * Vector3::z() / (2.0 * h);
                for i in 0..3 {
                    prop_assert!((col[i] - j[(i, c)]).abs() < 1e-8);
                }
            }
        }
    }
}
