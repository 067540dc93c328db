//! Receding-horizon planner maximizing the summed minimum Gramian eigenvalue.
//!
//! The decision variables are the free input components over `N` stages,
//! rescaled to the unit box. Range bounds enter through a quadratic penalty
//! whose weight grows while the plan stays infeasible; the inner loop is a
//! projected BFGS method with an Armijo line search. Gradients come from an
//! adjoint sweep over the rollout with finite-difference stage sensitivities.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EkfConfig;
use crate::liealg::SmoothSystem;
use crate::model::{rk4, Cls, ControlInput, RelativeState, INPUT_DIM, STATE_DIM};
use crate::obsv::stlog;
use crate::systems::PlanarRangeOnly;

/// A system the planner can steer: smooth dynamics plus a relative position.
pub trait PlanningModel: SmoothSystem + Sync {
    /// State slots holding the relative position.
    fn position_slots(&self) -> Range<usize>;

    fn range(&self, x: &[f64]) -> f64 {
        x[self.position_slots()].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl PlanningModel for Cls {
    fn position_slots(&self) -> Range<usize> {
        0..3
    }
}

impl PlanningModel for PlanarRangeOnly {
    fn position_slots(&self) -> Range<usize> {
        0..2
    }
}

/// Optimizer knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Quasi-Newton iterations per penalty phase.
    pub max_iterations: usize,
    /// Number of times the penalty weight may grow.
    pub max_penalty_updates: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Range violation [m] accepted as feasible.
    pub violation_tol: f64,
    /// Stop when the projected gradient falls below this fraction of its
    /// starting value.
    pub gradient_tol: f64,
    /// Range bounds are tightened by this margin [m] inside the penalty.
    pub bound_margin: f64,
    /// Wall-clock cap per solve [s]; zero disables it.
    pub time_budget: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Largest first step in normalized coordinates.
    pub first_step: f64,
    /// Amplitude of the deterministic perturbation added to a cold start,
    /// as a fraction of each box half-width.
    pub excitation: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            max_penalty_updates: 6,
            initial_penalty: 1e2,
            penalty_growth: 10.0,
            violation_tol: 1e-6,
            gradient_tol: 1e-6,
            bound_margin: 1e-2,
            time_budget: 2.0,
            fd_step: 1e-6,
            first_step: 0.1,
            excitation: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpcConfig {
    pub horizon_stages: usize,
    /// Stage length `ΔT` [s].
    pub stage_dt: f64,
    pub stlog_order: usize,
    /// Regularizer `c` in the cost `1/(V + c)`.
    pub reg_c: f64,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// `[d_min, d_max]` [m].
    pub range_bounds: [f64; 2],
    /// Output weighting inside the Gramian.
    #[serde(with = "crate::matrix_rows")]
    pub metric: DMatrix<f64>,
    /// Cold-start input; the box midpoint when absent.
    #[serde(default)]
    pub nominal_input: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverSettings,
}

/// Hover thrust of both vehicles [m/s²].
pub const GRAVITY: f64 = 9.81;

impl OpcConfig {
    /// Quadrotor defaults: leader held at hover, follower thrust in
    /// `[2, 20]` m/s², rates in `[-1, 1]` rad/s, range in `[1, 10]` m, and the
    /// inverse measurement covariance evaluated at `reference_range`.
    pub fn cls_default(ekf: &EkfConfig, reference_range: f64) -> Result<Self> {
        let r = ekf.measurement_covariance(reference_range);
        let metric = r
            .try_inverse()
            .ok_or(Error::Singular("measurement covariance"))?;
        Ok(Self {
            horizon_stages: 20,
            stage_dt: 0.2,
            stlog_order: 5,
            reg_c: 1e-6,
            input_lower: vec![GRAVITY, 0.0, 0.0, 0.0, 2.0, -1.0, -1.0, -1.0],
            input_upper: vec![GRAVITY, 0.0, 0.0, 0.0, 20.0, 1.0, 1.0, 1.0],
            range_bounds: [1.0, 10.0],
            metric,
            nominal_input: Some(ControlInput::trim(GRAVITY).to_array().to_vec()),
            solver: SolverSettings::default(),
        })
    }

    pub fn validate<Sys: SmoothSystem>(&self, sys: &Sys) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon_stages == 0 {
            return bad("horizon_stages must be at least 1");
        }
        if !(self.stage_dt > 0.0 && self.stage_dt.is_finite()) {
            return bad("stage_dt must be positive");
        }
        if self.stlog_order == 0 {
            return bad("stlog_order must be at least 1");
        }
        if !(self.reg_c > 0.0 && self.reg_c.is_finite()) {
            return bad("reg_c must be positive");
        }
        let m = sys.input_dim();
        if self.input_lower.len() != m || self.input_upper.len() != m {
            return Err(Error::Config(format!("input bounds must have {m} entries")));
        }
        if self
            .input_lower
            .iter()
            .zip(&self.input_upper)
            .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi)
        {
            return bad("input bounds must be finite with lower ≤ upper");
        }
        let [d_lo, d_hi] = self.range_bounds;
        if !(d_lo.is_finite() && d_hi.is_finite() && d_lo >= 0.0 && d_lo < d_hi) {
            return bad("range_bounds must satisfy 0 ≤ d_min < d_max");
        }
        let p = sys.obs_dim();
        if self.metric.nrows() != p || self.metric.ncols() != p {
            return Err(Error::Config(format!("metric must be {p}×{p}")));
        }
        if let Some(u) = &self.nominal_input {
            if u.len() != m {
                return Err(Error::Config(format!("nominal_input must have {m} entries")));
            }
        }
        let s = &self.solver;
        if !(s.penalty_growth > 1.0 && s.initial_penalty > 0.0 && s.fd_step > 0.0) {
            return bad("solver penalty settings and fd_step must be positive, growth above 1");
        }
        if !(s.time_budget >= 0.0 && s.bound_margin >= 0.0 && s.first_step > 0.0) {
            return bad("solver time_budget, bound_margin and first_step must be non-negative");
        }
        if 2.0 * s.bound_margin >= d_hi - d_lo {
            return bad("bound_margin leaves an empty range interval");
        }
        Ok(())
    }

    fn free_components(&self) -> Vec<usize> {
        (0..self.input_lower.len())
            .filter(|&i| self.input_upper[i] > self.input_lower[i])
            .collect()
    }

    fn range_violation(&self, d: f64) -> f64 {
        let [lo, hi] = self.range_bounds;
        (lo - d).max(d - hi).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub objective_v: f64,
    pub max_violation: f64,
    pub step_norm: f64,
    /// Cost plus penalty at the current weight.
    pub merit: f64,
    pub penalty_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub penalty_weight: f64,
    pub max_violation: f64,
    pub feasible: bool,
    pub budget_exhausted: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// One input per stage.
    pub inputs: Vec<Vec<f64>>,
    /// Rollout, `N + 1` states starting at the initial state.
    pub states: Vec<Vec<f64>>,
    pub objective_v: f64,
    pub cost: f64,
    pub per_stage_lambda: Vec<f64>,
    pub diagnostics: SolverDiagnostics,
}

impl Plan {
    pub fn control_inputs(&self) -> Vec<ControlInput> {
        self.inputs.iter().map(|u| ControlInput::from_slice(u)).collect()
    }

    pub fn relative_states(&self) -> Vec<RelativeState> {
        self.states.iter().map(|x| RelativeState::from_slice(x)).collect()
    }
}

/// States `x₀ … x_N` under one RK4 step of `dt` per input.
pub fn rollout<Sys: SmoothSystem>(sys: &Sys, x0: &[f64], inputs: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.to_vec());
    for u in inputs {
        let next = rk4(sys, states.last().expect("non-empty"), u, dt);
        states.push(next);
    }
    states
}

/// `V = Σₖ λ_min(W(xₖ, uₖ; ΔT))` and the per-stage terms.
pub fn objective_v<Sys: PlanningModel>(
    sys: &Sys,
    states: &[Vec<f64>],
    inputs: &[Vec<f64>],
    cfg: &OpcConfig,
) -> Result<(f64, Vec<f64>)> {
    if states.len() != inputs.len() + 1 {
        return Err(Error::Dimension(format!(
            "{} states for {} inputs",
            states.len(),
            inputs.len()
        )));
    }
    let lambdas = inputs
        .par_iter()
        .zip(states.par_iter())
        .map(|(u, x)| {
            let w = stlog(sys, x, u, cfg.stage_dt, cfg.stlog_order, &cfg.metric)?;
            Ok(w.min_eigenvalue.max(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((lambdas.iter().sum(), lambdas))
}

/// Drops the first `k` inputs and repeats the last one to keep the length.
pub fn shift_inputs(inputs: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = inputs.len();
    let last = inputs.last().cloned().unwrap_or_default();
    (0..n)
        .map(|i| inputs.get(i + k).cloned().unwrap_or_else(|| last.clone()))
        .collect()
}

#[derive(Clone)]
struct Eval {
    inputs: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    v: f64,
    cost: f64,
    penalty: f64,
    max_violation: f64,
}

impl Eval {
    fn merit(&self, mu: f64) -> f64 {
        self.cost + mu * self.penalty
    }
}

struct StageSensitivity {
    dl_dx: Vec<f64>,
    dl_du: Vec<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

struct Problem<'a, Sys> {
    sys: &'a Sys,
    cfg: &'a OpcConfig,
    x0: Vec<f64>,
    free: Vec<usize>,
    base_input: Vec<f64>,
}

impl<Sys: PlanningModel> Problem<'_, Sys> {
    fn n_vars(&self) -> usize {
        self.free.len() * self.cfg.horizon_stages
    }

    fn width(&self, comp: usize) -> f64 {
        self.cfg.input_upper[comp] - self.cfg.input_lower[comp]
    }

    fn to_inputs(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let nf = self.free.len();
        (0..self.cfg.horizon_stages)
            .map(|k| {
                let mut u = self.base_input.clone();
                for (j, &c) in self.free.iter().enumerate() {
                    u[c] = self.cfg.input_lower[c] + z[k * nf + j] * self.width(c);
                }
                u
            })
            .collect()
    }

    fn to_vars(&self, inputs: &[Vec<f64>]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n_vars());
        for u in inputs {
            for &c in &self.free {
                z.push(((u[c] - self.cfg.input_lower[c]) / self.width(c)).clamp(0.0, 1.0));
            }
        }
        z
    }

    fn penalty_term(&self, d: f64) -> (f64, f64) {
        let m = self.cfg.solver.bound_margin;
        let lo = self.cfg.range_bounds[0] + m;
        let hi = self.cfg.range_bounds[1] - m;
        if d < lo {
            ((lo - d).powi(2), -2.0 * (lo - d))
        } else if d > hi {
            ((d - hi).powi(2), 2.0 * (d - hi))
        } else {
            (0.0, 0.0)
        }
    }

    fn evaluate(&self, z: &[f64]) -> Result<Eval> {
        let inputs = self.to_inputs(z);
        let states = rollout(self.sys, &self.x0, &inputs, self.cfg.stage_dt);
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("planner rollout"));
        }
        let (v, lambdas) = objective_v(self.sys, &states, &inputs, self.cfg)?;
        let mut penalty = 0.0;
        let mut max_violation: f64 = 0.0;
        for x in &states[1..] {
            let d = self.sys.range(x);
            penalty += self.penalty_term(d).0;
            max_violation = max_violation.max(self.cfg.range_violation(d));
        }
        Ok(Eval {
            cost: 1.0 / (v + self.cfg.reg_c),
            inputs,
            states,
            lambdas,
            v,
            penalty,
            max_violation,
        })
    }

    fn stage_eigenvalues(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        Ok(stlog(self.sys, x, u, cfg.stage_dt, cfg.stlog_order, &cfg.metric)?.eigenvalues)
    }

    fn stage_sensitivity(&self, x: &[f64], u: &[f64]) -> Result<StageSensitivity> {
        let cfg = self.cfg;
        let h_rel = cfg.solver.fd_step;

        // Soft minimum with β frozen at the base point. It equals λ_min to
        // working precision once the gap exceeds a few percent of λ₂ and
        // blends the lowest eigenvalues near a crossing.
        let eig0 = self.stage_eigenvalues(x, u)?;
        let scale = eig0.get(1).copied().unwrap_or(eig0[0]).max(f64::MIN_POSITIVE);
        let beta = 1e3 / scale;
        let soft_min = |eig: &[f64]| -> f64 {
            let l1 = eig[0];
            let sum: f64 = eig.iter().map(|l| (-beta * (l - l1)).exp()).sum();
            l1 - sum.ln() / beta
        };
        let s0 = soft_min(&eig0);
        let n = x.len();
        let mut xp = x.to_vec();
        let mut up = u.to_vec();
        let mut dl_dx = vec![0.0; n];
        for i in 0..n {
            let h = h_rel * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            dl_dx[i] = (soft_min(&self.stage_eigenvalues(&xp, u)?) - s0) / h;
            xp[i] = x[i];
        }
        let mut dl_du = vec![0.0; self.free.len()];
        for (j, &c) in self.free.iter().enumerate() {
            let h = h_rel * (1.0 + u[c].abs());
            up[c] = u[c] + h;
            dl_du[j] = (soft_min(&self.stage_eigenvalues(x, &up)?) - s0) / h;
            up[c] = u[c];
        }

        let dt = cfg.stage_dt;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let h = h_rel * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = rk4(self.sys, &xp, u, dt);
            xp[i] = x[i] - h;
            let fm = rk4(self.sys, &xp, u, dt);
            xp[i] = x[i];
            for r in 0..n {
                a[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let mut b = DMatrix::zeros(n, self.free.len());
        for (j, &c) in self.free.iter().enumerate() {
            let h = h_rel * (1.0 + u[c].abs());
            up[c] = u[c] + h;
            let fp = rk4(self.sys, x, &up, dt);
            up[c] = u[c] - h;
            let fm = rk4(self.sys, x, &up, dt);
            up[c] = u[c];
            for r in 0..n {
                b[(r, j)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        Ok(StageSensitivity { dl_dx, dl_du, a, b })
    }

    /// Merit gradient in normalized coordinates by a backward adjoint sweep.
    fn gradient(&self, ev: &Eval, mu: f64) -> Result<Vec<f64>> {
        let n_stages = self.cfg.horizon_stages;
        let sens = (0..n_stages)
            .into_par_iter()
            .map(|k| self.stage_sensitivity(&ev.states[k], &ev.inputs[k]))
            .collect::<Result<Vec<_>>>()?;
        let c = self.cfg.reg_c;
        let dcost_dv = -1.0 / (ev.v + c).powi(2);
        let n = self.x0.len();
        let nf = self.free.len();
        let slots = self.sys.position_slots();

        let mut grad = vec![0.0; self.n_vars()];
        let mut p = DVector::zeros(n);
        for k in (0..=n_stages).rev() {
            let mut gx = DVector::zeros(n);
            if k >= 1 {
                let x = &ev.states[k];
                let d = self.sys.range(x);
                let dphi = self.penalty_term(d).1;
                if dphi != 0.0 && d > 0.0 {
                    for i in slots.clone() {
                        gx[i] += mu * dphi * x[i] / d;
                    }
                }
            }
            if k < n_stages {
                let s = &sens[k];
                for i in 0..n {
                    gx[i] += dcost_dv * s.dl_dx[i];
                }
                let gu = s.b.transpose() * &p;
                for j in 0..nf {
                    let c = self.free[j];
                    grad[k * nf + j] = (dcost_dv * s.dl_du[j] + gu[j]) * self.width(c);
                }
                p = gx + s.a.transpose() * &p;
            } else {
                p = gx;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("planner gradient"));
        }
        Ok(grad)
    }
}

fn projected_gradient_norm(z: &[f64], g: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .map(|(&zi, &gi)| ((zi - gi).clamp(0.0, 1.0) - zi).abs())
        .fold(0.0, f64::max)
}

fn blocked(z: f64, d: f64) -> bool {
    (z <= 0.0 && d < 0.0) || (z >= 1.0 && d > 0.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dimensions<Sys: SmoothSystem>(sys: &Sys, plan: &Plan, cfg: &OpcConfig) -> Result<()> {
    if plan.inputs.len() != cfg.horizon_stages || plan.inputs.iter().any(|u| u.len() != sys.input_dim()) {
        return Err(Error::Dimension(format!(
            "warm plan has {} stages, expected {} inputs of length {}",
            plan.inputs.len(),
            cfg.horizon_stages,
            sys.input_dim()
        )));
    }
    Ok(())
}

fn cold_start(free: &[usize], base: &[f64], cfg: &OpcConfig) -> Vec<Vec<f64>> {
    let amp = cfg.solver.excitation;
    (0..cfg.horizon_stages)
        .map(|k| {
            let mut u = base.to_vec();
            for (j, &c) in free.iter().enumerate() {
                let half = 0.5 * (cfg.input_upper[c] - cfg.input_lower[c]);
                let wobble = (1.3 * k as f64 + 2.1 * j as f64 + 0.7).sin();
                u[c] = (u[c] + amp * half * wobble).clamp(cfg.input_lower[c], cfg.input_upper[c]);
            }
            u
        })
        .collect()
}

/// Maximizes `V` over the horizon starting at `x0`.
///
/// Returns the best feasible iterate, or the least infeasible one flagged in
/// the diagnostics when no iterate meets the range bounds.
pub fn solve<Sys: PlanningModel>(sys: &Sys, x0: &[f64], warm: Option<&Plan>, cfg: &OpcConfig) -> Result<Plan> {
    cfg.validate(sys)?;
    if x0.len() != sys.state_dim() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("initial state must be finite with the system's dimension".into()));
    }
    let d0 = sys.range(x0);
    if cfg.range_violation(d0) > 0.0 {
        return Err(Error::Precondition(format!(
            "initial range {d0} outside bounds {:?}",
            cfg.range_bounds
        )));
    }
    let free = cfg.free_components();
    let base_input: Vec<f64> = match &cfg.nominal_input {
        Some(u) => u
            .iter()
            .enumerate()
            .map(|(i, v)| v.clamp(cfg.input_lower[i], cfg.input_upper[i]))
            .collect(),
        None => (0..sys.input_dim())
            .map(|i| 0.5 * (cfg.input_lower[i] + cfg.input_upper[i]))
            .collect(),
    };
    let problem = Problem { sys, cfg, x0: x0.to_vec(), free, base_input };
    let start_inputs = match warm {
        Some(plan) => {
            check_dimensions(sys, plan, cfg)?;
            plan.inputs.clone()
        }
        None => cold_start(&problem.free, &problem.base_input, cfg),
    };
    let mut z = problem.to_vars(&start_inputs);
    let started = Instant::now();
    let settings = &cfg.solver;
    let out_of_time = || settings.time_budget > 0.0 && started.elapsed().as_secs_f64() > settings.time_budget;

    let mut mu = settings.initial_penalty;
    let mut current = problem.evaluate(&z)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        cost: current.cost,
        objective_v: current.v,
        max_violation: current.max_violation,
        step_norm: 0.0,
        merit: current.merit(mu),
        penalty_weight: mu,
    }];
    let mut best = current.clone();
    let better = |cand: &Eval, best: &Eval| {
        let tol = settings.violation_tol;
        match (cand.max_violation <= tol, best.max_violation <= tol) {
            (true, true) => cand.cost < best.cost,
            (true, false) => true,
            (false, true) => false,
            (false, false) => cand.max_violation < best.max_violation,
        }
    };
    let n = problem.n_vars();
    let mut iterations = 0;
    let mut budget_exhausted = false;

    'phases: for phase in 0..=settings.max_penalty_updates {
        if n == 0 {
            break;
        }
        let mut g = problem.gradient(&current, mu)?;
        let pg0 = projected_gradient_norm(&z, &g).max(f64::MIN_POSITIVE);
        let mut h_inv: Option<DMatrix<f64>> = None;
        for _ in 0..settings.max_iterations {
            if out_of_time() {
                budget_exhausted = true;
                break 'phases;
            }
            if projected_gradient_norm(&z, &g) <= settings.gradient_tol * pg0 {
                break;
            }
            let merit0 = current.merit(mu);
            let mut accepted = None;
            for attempt in 0..2 {
                let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
                let mut d: Vec<f64> = match (&h_inv, attempt) {
                    (Some(h), 0) => (h * DVector::from_column_slice(&g)).iter().map(|v| -v).collect(),
                    _ => g.iter().map(|v| -v * settings.first_step / gmax).collect(),
                };
                for i in 0..n {
                    if blocked(z[i], d[i]) {
                        d[i] = 0.0;
                    }
                }
                if dot(&g, &d) >= 0.0 {
                    h_inv = None;
                    continue;
                }
                let mut alpha = 1.0;
                for _ in 0..30 {
                    let zt: Vec<f64> = z.iter().zip(&d).map(|(zi, di)| (zi + alpha * di).clamp(0.0, 1.0)).collect();
                    let s: Vec<f64> = zt.iter().zip(&z).map(|(a, b)| a - b).collect();
                    let decrease = dot(&g, &s);
                    if decrease < 0.0 {
                        let cand = problem.evaluate(&zt)?;
                        if cand.merit(mu) <= merit0 + 1e-4 * decrease {
                            accepted = Some((zt, s, cand));
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
                h_inv = None;
            }
            let Some((zt, s, cand)) = accepted else { break };
            let g_new = problem.gradient(&cand, mu)?;
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            let s_norm = dot(&s, &s).sqrt();
            let y_norm = dot(&y, &y).sqrt();
            if sy > 1e-12 * s_norm * y_norm {
                let sv = DVector::from_column_slice(&s);
                let yv = DVector::from_column_slice(&y);
                let h = h_inv.take().unwrap_or_else(|| DMatrix::identity(n, n) * (sy / dot(&y, &y)));
                let rho = 1.0 / sy;
                let hy = &h * &yv;
                let yhy = yv.dot(&hy);
                let updated = &h - (&hy * sv.transpose() + &sv * hy.transpose()) * rho
                    + &sv * sv.transpose() * (rho * rho * yhy + rho);
                h_inv = Some(updated);
            }
            iterations += 1;
            z = zt;
            g = g_new;
            current = cand;
            trace.push(TraceRow {
                iteration: iterations,
                cost: current.cost,
                objective_v: current.v,
                max_violation: current.max_violation,
                step_norm: s_norm,
                merit: current.merit(mu),
                penalty_weight: mu,
            });
            if better(&current, &best) {
                best = current.clone();
            }
        }
        debug!(
            "phase {phase}: V = {:.3e}, violation = {:.2e}, mu = {mu:.1e}",
            current.v, current.max_violation
        );
        if current.max_violation <= settings.violation_tol {
            break;
        }
        mu *= settings.penalty_growth;
    }

    let feasible = best.max_violation <= settings.violation_tol;
    Ok(Plan {
        inputs: best.inputs,
        states: best.states,
        objective_v: best.v,
        cost: best.cost,
        per_stage_lambda: best.lambdas,
        diagnostics: SolverDiagnostics {
            iterations,
            penalty_weight: mu,
            max_violation: best.max_violation,
            feasible,
            budget_exhausted,
            trace,
        },
    })
}

/// Re-solves from `x_estimate` warm-started with `prev` shifted by one stage.
/// Returns the input to apply now and the new plan.
pub fn receding_horizon_step<Sys: PlanningModel>(
    sys: &Sys,
    x_estimate: &[f64],
    prev: &Plan,
    cfg: &OpcConfig,
) -> Result<(Vec<f64>, Plan)> {
    receding_horizon_step_by(sys, x_estimate, prev, 1, cfg)
}

/// Like [`receding_horizon_step`] after `stages` applied stages.
pub fn receding_horizon_step_by<Sys: PlanningModel>(
    sys: &Sys,
    x_estimate: &[f64],
    prev: &Plan,
    stages: usize,
    cfg: &OpcConfig,
) -> Result<(Vec<f64>, Plan)> {
    check_dimensions(sys, prev, cfg)?;
    let mut warm = prev.clone();
    warm.inputs = shift_inputs(&prev.inputs, stages);
    let plan = solve(sys, x_estimate, Some(&warm), cfg)?;
    Ok((plan.inputs[0].clone(), plan))
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iteration,cost,objective_v,max_violation,step_norm\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            row.iteration, row.cost, row.objective_v, row.max_violation, row.step_norm
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Quadrotor state as a flat vector, for the generic planner.
pub fn cls_state(x: &RelativeState) -> [f64; STATE_DIM] {
    let v = x.to_vector();
    let mut out = [0.0; STATE_DIM];
    out.copy_from_slice(v.as_slice());
    out
}

/// Quadrotor input as a flat vector.
pub fn cls_input(u: &ControlInput) -> [f64; INPUT_DIM] {
    u.to_array()
}
