//! Closed-loop Monte Carlo scenarios: truth propagation with input and
//! observation noise, the EKF in the loop, and accuracy metrics.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{predict, sample_input_noise, update, Belief, EkfConfig};
use crate::model::{
    observe, quat_exp, quat_mul, rk4, ControlInput, Cls, Observation, RelativeState, STATE_DIM,
};
use crate::noise::{pointwise_variance_factor, sample_path_with, sigma_factor, NoisePath, NoiseSpec};
use crate::opc::{cls_state, receding_horizon_step_by, solve, OpcConfig, Plan, GRAVITY};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FollowerMode {
    Straight,
    Zigzag,
    Opc,
}

impl FollowerMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::Zigzag => "zigzag",
            Self::Opc => "opc",
        }
    }
}

impl std::str::FromStr for FollowerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "zigzag" => Ok(Self::Zigzag),
            "opc" => Ok(Self::Opc),
            _ => Err(Error::Config(format!("unknown follower mode {s:?}"))),
        }
    }
}

/// Lateral triangle wave added to the formation offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zigzag {
    /// Peak lateral displacement [m].
    pub amplitude: f64,
    /// [s]
    pub period: f64,
}

impl Default for Zigzag {
    fn default() -> Self {
        Self { amplitude: 2.0, period: 8.0 }
    }
}

impl Zigzag {
    /// Offset and its rate at time `t`.
    pub fn offset(&self, t: f64) -> (f64, f64) {
        if self.amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let phase = (t / self.period).rem_euclid(1.0);
        let slope = 4.0 * self.amplitude / self.period;
        if phase < 0.25 {
            (4.0 * self.amplitude * phase, slope)
        } else if phase < 0.75 {
            (self.amplitude * (2.0 - 4.0 * phase), -slope)
        } else {
            (self.amplitude * (4.0 * phase - 4.0), slope)
        }
    }
}

/// Gains of the follower's formation-keeping controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingGains {
    pub position: f64,
    pub velocity: f64,
    /// Tilt-correction rate gain [1/s].
    pub attitude: f64,
    /// Cap on the commanded relative acceleration [m/s²].
    pub max_accel: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self {
            position: 0.6,
            velocity: 1.2,
            attitude: 3.0,
            max_accel: 2.0,
        }
    }
}

/// Scenario definition shared by all trials of a campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// [s]
    pub duration: f64,
    pub ekf: EkfConfig,
    pub follower_mode: FollowerMode,
    /// Leader ground speed [m/s]. Both vehicles share it, so it only enters
    /// the world-frame picture.
    pub leader_speed: f64,
    pub zigzag: Zigzag,
    pub opc: OpcConfig,
    /// Per-trial seeds; trial `i` falls back to `i` when the list is short.
    pub noise_seeds: Vec<u64>,
    pub trials: usize,
    pub initial_state: RelativeState,
    #[serde(with = "crate::matrix_rows")]
    pub initial_covariance: DMatrix<f64>,
    /// Truth integration step [s].
    pub truth_dt: f64,
    /// Stages applied between replans in opc mode.
    pub replan_stages: usize,
    /// Position error norm beyond which a trial is flagged diverged [m].
    pub divergence_bound: f64,
    pub tracking: TrackingGains,
    /// Inject input and observation noise into the truth.
    pub inject_noise: bool,
    /// Draw the initial estimate from the initial covariance.
    pub sample_initial_error: bool,
    /// Window of each sampled observation-noise path [s].
    pub noise_window: f64,
    /// Equal-energy components per window.
    pub noise_components: usize,
    pub noise_alpha: f64,
    /// Keep the time series in the result.
    pub keep_series: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let ekf = EkfConfig::default();
        let mut opc = OpcConfig::cls_default(&ekf, 3.0).expect("default measurement covariance is invertible");
        opc.solver.max_iterations = 5;
        opc.solver.max_penalty_updates = 3;
        opc.solver.time_budget = 0.0;
        opc.solver.bound_margin = 0.2;
        opc.range_bounds = [2.0, 5.0];
        let p0 = [0.25, 0.25, 0.25, 1e-4, 1e-4, 1e-4, 1e-4, 0.01, 0.01, 0.01];
        Self {
            duration: 120.0,
            ekf,
            follower_mode: FollowerMode::Straight,
            leader_speed: 1.0,
            zigzag: Zigzag::default(),
            opc,
            noise_seeds: Vec::new(),
            trials: 50,
            initial_state: RelativeState::hover(Vector3::new(3.0, 0.0, 0.0)),
            initial_covariance: DMatrix::from_diagonal(&DVector::from_row_slice(&p0)),
            truth_dt: 0.01,
            replan_stages: 5,
            divergence_bound: 50.0,
            tracking: TrackingGains::default(),
            inject_noise: true,
            sample_initial_error: true,
            noise_window: 1.0,
            noise_components: 100,
            noise_alpha: 2.0,
            keep_series: true,
        }
    }
}

fn ratio_steps(long: f64, short: f64) -> Option<usize> {
    let n = (long / short).round();
    ((n * short - long).abs() <= 1e-9 * long && n >= 1.0).then_some(n as usize)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.ekf.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(self.truth_dt > 0.0) || ratio_steps(self.ekf.dt, self.truth_dt).is_none() {
            return bad("ekf.dt must be a positive multiple of truth_dt".into());
        }
        if ratio_steps(self.opc.stage_dt, self.ekf.dt).is_none() {
            return bad("opc.stage_dt must be a positive multiple of ekf.dt".into());
        }
        if ratio_steps(self.noise_window, self.ekf.dt).is_none() {
            return bad("noise_window must be a positive multiple of ekf.dt".into());
        }
        if self.replan_stages == 0 || self.replan_stages > self.opc.horizon_stages {
            return bad("replan_stages must be in 1..=opc.horizon_stages".into());
        }
        if !(self.divergence_bound > 0.0) {
            return bad("divergence_bound must be positive".into());
        }
        if !(self.zigzag.period > 0.0) || !self.zigzag.amplitude.is_finite() {
            return bad("zigzag period must be positive and amplitude finite".into());
        }
        if self.initial_covariance.nrows() != STATE_DIM || self.initial_covariance.ncols() != STATE_DIM {
            return bad("initial_covariance must be 10×10".into());
        }
        if Cholesky::new(self.initial_covariance.clone()).is_none() {
            return bad("initial_covariance must be positive definite".into());
        }
        if !self.initial_state.is_finite() || (self.initial_state.q.norm() - 1.0).abs() > 1e-6 {
            return bad("initial_state must be finite with a unit quaternion".into());
        }
        let g = self.tracking;
        if [g.position, g.velocity, g.attitude, g.max_accel].iter().any(|v| !(*v >= 0.0)) {
            return bad("tracking gains must be non-negative".into());
        }
        self.opc.validate(&Cls)?;
        self.observation_noise_spec()?;
        Ok(())
    }

    pub fn seed_for(&self, trial: usize) -> u64 {
        self.noise_seeds.get(trial).copied().unwrap_or(trial as u64)
    }

    /// Noise process of `(range, φ)` drawn once per window.
    pub fn observation_noise_spec(&self) -> Result<NoiseSpec> {
        let a = self.ekf.attitude_var;
        let sigma = DMatrix::from_diagonal(&DVector::from_row_slice(&[self.ekf.range_var, a, a, a]));
        NoiseSpec::new(self.noise_window, self.noise_components, self.noise_alpha, sigma)
    }

    fn steps(&self) -> usize {
        (self.duration / self.ekf.dt).round() as usize
    }
}

/// Per-axis accuracy figures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    /// Smallest absolute error [m].
    pub min: f64,
    /// Largest absolute error [m].
    pub max: f64,
    pub rms: f64,
    /// Area under 3σ(t) [m·s].
    pub area3sigma: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisTable {
    pub x: AxisSummary,
    pub y: AxisSummary,
    pub z: AxisSummary,
}

impl AxisTable {
    pub fn axes(&self) -> [AxisSummary; 3] {
        [self.x, self.y, self.z]
    }

    fn from_axes(a: [AxisSummary; 3]) -> Self {
        Self { x: a[0], y: a[1], z: a[2] }
    }
}

/// Time series recorded at the filter rate, starting at `t = 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialSeries {
    pub t: Vec<f64>,
    pub truth: Vec<RelativeState>,
    pub estimate: Vec<RelativeState>,
    pub covariance_diagonal: Vec<[f64; STATE_DIM]>,
}

impl TrialSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Estimate minus truth, position only.
    pub fn position_error(&self, i: usize) -> Vector3<f64> {
        self.estimate[i].r - self.truth[i].r
    }

    pub fn position_sigma(&self, i: usize) -> [f64; 3] {
        [0, 1, 2].map(|k| self.covariance_diagonal[i][k].max(0.0).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub mode: FollowerMode,
    pub seed: u64,
    pub diverged: bool,
    /// Replans that failed and fell back to formation keeping.
    pub planner_fallbacks: usize,
    pub covariance_repairs: u32,
    /// Smallest true range over the run [m].
    pub min_range: f64,
    pub max_range: f64,
    pub summary: AxisTable,
    pub series: TrialSeries,
}

/// Streaming root-mean-square.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningRms {
    count: usize,
    sum_sq: f64,
}

impl RunningRms {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum_sq += v * v;
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.sum_sq / self.count as f64).sqrt()
        }
    }
}

pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean_sq = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    mean_sq.sqrt()
}

/// Trapezoidal integral of `3σ(t)` on a uniform grid.
pub fn metric_3sigma_area(sigma: &[f64], dt: f64) -> Result<f64> {
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Precondition(format!("σ must be non-negative, got {s}")));
    }
    let inner: f64 = sigma.windows(2).map(|w| w[0] + w[1]).sum();
    Ok(1.5 * dt * inner)
}

#[derive(Default)]
struct AxisAccumulator {
    min: f64,
    max: f64,
    rms: RunningRms,
    sigma: Vec<f64>,
}

impl AxisAccumulator {
    fn push(&mut self, err: f64, sigma: f64) {
        let a = err.abs();
        if self.sigma.is_empty() {
            self.min = a;
            self.max = a;
        } else {
            self.min = self.min.min(a);
            self.max = self.max.max(a);
        }
        self.rms.push(err);
        self.sigma.push(sigma);
    }

    fn finish(&self, dt: f64) -> AxisSummary {
        AxisSummary {
            min: self.min,
            max: self.max,
            rms: self.rms.value(),
            area3sigma: metric_3sigma_area(&self.sigma, dt).unwrap_or(f64::NAN),
        }
    }
}

/// The three independent random streams of a trial. Each stream's draws do
/// not depend on the follower mode, so trials with equal seeds share noise.
struct NoiseStreams {
    input: ChaCha8Rng,
    observation: ChaCha8Rng,
    initial: ChaCha8Rng,
}

impl NoiseStreams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            input: stream(1),
            observation: stream(2),
            initial: stream(3),
        }
    }
}

/// Leader command: level flight at hover thrust.
fn leader_command() -> ControlInput {
    ControlInput::trim(GRAVITY)
}

/// Formation-keeping command toward `r_ref` computed from the estimate.
pub fn tracking_command(
    x: &RelativeState,
    r_ref: &Vector3<f64>,
    r_ref_rate: &Vector3<f64>,
    gains: &TrackingGains,
    opc: &OpcConfig,
) -> ControlInput {
    let mut a = (r_ref - x.r) * gains.position + (r_ref_rate - x.v) * gains.velocity;
    let n = a.norm();
    if n > gains.max_accel {
        a *= gains.max_accel / n;
    }
    let leader = leader_command();
    let b = crate::model::rot_mat_free(&x.q) * Vector3::z();
    // v̇ ≈ fˡb − fᶠe₃ must equal the desired acceleration, so the follower
    // thrust axis is turned onto fˡb − a.
    let c = b * leader.f_l - a;
    let c_hat = c.normalize();
    let w = Vector3::z().cross(&c_hat) * gains.attitude;
    let mut u = leader;
    u.f_f = c.z;
    u.w_f = w;
    clamp_input(u, opc)
}

fn clamp_input(u: ControlInput, opc: &OpcConfig) -> ControlInput {
    let mut arr = u.to_array();
    for (i, v) in arr.iter_mut().enumerate() {
        *v = v.clamp(opc.input_lower[i], opc.input_upper[i]);
    }
    ControlInput::from_slice(&arr)
}

/// Noisy measurement of `x`: range perturbed additively, attitude by a small
/// rotation.
pub fn perturbed_observation(x: &RelativeState, eta: &[f64]) -> Observation {
    let d = x.range() + eta[0];
    let dq = quat_exp(&Vector3::new(eta[1], eta[2], eta[3]));
    let mut q = quat_mul(&x.q, &dq);
    q /= q.norm();
    Observation {
        half_range_sq: 0.5 * d * d,
        q_rel: q,
    }
}

/// Mean of the pointwise variance factor over the instants at which a path
/// is sampled. Dividing `Σ` by it makes the per-sample variance match the
/// filter's measurement model.
pub fn observation_noise_gain(cfg: &ScenarioConfig, spec: &NoiseSpec) -> f64 {
    let per_window = ratio_steps(cfg.noise_window, cfg.ekf.dt).unwrap_or(1);
    (0..per_window)
        .map(|k| pointwise_variance_factor(spec, (k as f64 + 0.5) * cfg.ekf.dt))
        .sum::<f64>()
        / per_window as f64
}

/// One running closed loop.
struct Trial<'a> {
    cfg: &'a ScenarioConfig,
    truth: Vec<f64>,
    belief: Belief,
    prior: Option<Belief>,
    streams: NoiseStreams,
    noise_spec: NoiseSpec,
    noise_factor: DMatrix<f64>,
    noise_path: Option<NoisePath>,
    plan: Option<Plan>,
    plan_step: usize,
    step: usize,
    planner_fallbacks: usize,
    truth_substeps: usize,
    steps_per_stage: usize,
    steps_per_window: usize,
}

impl<'a> Trial<'a> {
    fn new(cfg: &'a ScenarioConfig, seed: u64) -> Result<Self> {
        let mut streams = NoiseStreams::new(seed);
        let x0 = cfg.initial_state;
        let mut mean = x0.to_vector();
        if cfg.sample_initial_error {
            let l = Cholesky::new(cfg.initial_covariance.clone())
                .ok_or(Error::Config("initial_covariance must be positive definite".into()))?
                .l();
            let z = DVector::from_fn(STATE_DIM, |_, _| StandardNormal.sample(&mut streams.initial));
            let dx = l * z;
            for i in 0..STATE_DIM {
                mean[i] += dx[i];
            }
        }
        let mut mean = RelativeState::from_vector(&mean);
        mean.normalize();
        let noise_spec = cfg.observation_noise_spec()?;
        let noise_factor = sigma_factor(&noise_spec) / observation_noise_gain(cfg, &noise_spec).sqrt();
        Ok(Self {
            cfg,
            truth: cls_state(&x0).to_vec(),
            belief: Belief::new(mean, cfg.initial_covariance.clone(), 0.0)?,
            prior: None,
            streams,
            noise_spec,
            noise_factor,
            noise_path: None,
            plan: None,
            plan_step: 0,
            step: 0,
            planner_fallbacks: 0,
            truth_substeps: ratio_steps(cfg.ekf.dt, cfg.truth_dt).unwrap_or(1),
            steps_per_stage: ratio_steps(cfg.opc.stage_dt, cfg.ekf.dt).unwrap_or(1),
            steps_per_window: ratio_steps(cfg.noise_window, cfg.ekf.dt).unwrap_or(1),
        })
    }

    fn time(&self) -> f64 {
        self.step as f64 * self.cfg.ekf.dt
    }

    fn truth_state(&self) -> RelativeState {
        RelativeState::from_slice(&self.truth)
    }

    fn formation_command(&self) -> ControlInput {
        let cfg = self.cfg;
        let (offset, rate) = match cfg.follower_mode {
            FollowerMode::Zigzag => cfg.zigzag.offset(self.time()),
            _ => (0.0, 0.0),
        };
        let r_ref = cfg.initial_state.r + Vector3::y() * offset;
        let rate = Vector3::y() * rate;
        // Pre-planned references are flown by the vehicle's own autopilot,
        // which sees the true state; the filter only observes.
        tracking_command(&self.truth_state(), &r_ref, &rate, &cfg.tracking, &cfg.opc)
    }

    fn opc_command(&mut self) -> ControlInput {
        let replan_every = self.cfg.replan_stages * self.steps_per_stage;
        let since = self.step - self.plan_step;
        if self.plan.is_none() || since >= replan_every {
            let x = cls_state(&self.belief.mean);
            let attempt = match &self.plan {
                Some(prev) => {
                    let shift = since / self.steps_per_stage;
                    receding_horizon_step_by(&Cls, &x, prev, shift, &self.cfg.opc).map(|(_, p)| p)
                }
                None => solve(&Cls, &x, None, &self.cfg.opc),
            };
            match attempt {
                Ok(plan) => {
                    debug!(
                        "replan at t={:.1}: V={:.3e}, feasible={}",
                        self.time(),
                        plan.objective_v,
                        plan.diagnostics.feasible
                    );
                    self.plan = Some(plan);
                    self.plan_step = self.step;
                }
                Err(e) => {
                    debug!("replan at t={:.1} failed: {e}", self.time());
                    self.planner_fallbacks += 1;
                    self.plan = None;
                    return self.hold_command();
                }
            }
        }
        let plan = self.plan.as_ref().expect("plan present after replanning");
        let stage = (self.step - self.plan_step) / self.steps_per_stage;
        ControlInput::from_slice(&plan.inputs[stage.min(plan.inputs.len() - 1)])
    }

    /// Steers back toward the formation offset while no plan is available.
    fn hold_command(&self) -> ControlInput {
        let cfg = self.cfg;
        tracking_command(&self.belief.mean, &cfg.initial_state.r, &Vector3::zeros(), &cfg.tracking, &cfg.opc)
    }

    fn command(&mut self) -> ControlInput {
        match self.cfg.follower_mode {
            FollowerMode::Opc => self.opc_command(),
            _ => self.formation_command(),
        }
    }

    fn observation_noise(&mut self) -> Vec<f64> {
        let k = self.step % self.steps_per_window;
        if k == 0 || self.noise_path.is_none() {
            self.noise_path = Some(sample_path_with(
                &self.noise_spec,
                &self.noise_factor,
                &mut self.streams.observation,
            ));
        }
        let path = self.noise_path.as_ref().expect("noise path drawn");
        let t = (k as f64 + 0.5) * self.cfg.ekf.dt;
        path.eval(t).map(|v| v.as_slice().to_vec()).unwrap_or_else(|_| vec![0.0; 4])
    }

    /// Advances truth and filter by one filter step.
    fn advance(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let u = self.command();
        let u_arr = u.to_array();
        for _ in 0..self.truth_substeps {
            let mut applied = u_arr;
            if cfg.inject_noise {
                let w = sample_input_noise(&cfg.ekf, &mut self.streams.input);
                for (a, n) in applied.iter_mut().zip(w) {
                    *a += n;
                }
            }
            self.truth = rk4(&Cls, &self.truth, &applied, cfg.truth_dt);
        }
        let eta = self.observation_noise();
        self.step += 1;
        let truth = self.truth_state();
        let y = if cfg.inject_noise {
            perturbed_observation(&truth, &eta)
        } else {
            observe(&truth)
        };
        let prior = predict(&self.belief, &u, &cfg.ekf)?;
        self.belief = update(&prior, &y, &cfg.ekf)?.belief;
        self.prior = Some(prior);
        Ok(())
    }
}

/// Runs one trial; deterministic in `(cfg, seed)`.
pub fn run_trial(cfg: &ScenarioConfig, seed: u64) -> Result<TrialResult> {
    cfg.validate()?;
    let mut trial = Trial::new(cfg, seed)?;
    let mut series = TrialSeries::default();
    let mut axes: [AxisAccumulator; 3] = Default::default();
    let mut min_range = f64::INFINITY;
    let mut max_range = 0.0_f64;
    let mut diverged = false;
    let steps = cfg.steps();
    loop {
        let truth = trial.truth_state();
        let est = trial.belief.mean;
        let err = est.r - truth.r;
        let sigma = trial.belief.position_sigma();
        for k in 0..3 {
            axes[k].push(err[k], sigma[k]);
        }
        let d = truth.range();
        min_range = min_range.min(d);
        max_range = max_range.max(d);
        if cfg.keep_series {
            series.t.push(trial.time());
            series.truth.push(truth);
            series.estimate.push(est);
            let mut diag = [0.0; STATE_DIM];
            for (i, v) in diag.iter_mut().enumerate() {
                *v = trial.belief.covariance[(i, i)];
            }
            series.covariance_diagonal.push(diag);
        }
        if !(err.norm() <= cfg.divergence_bound) || !est.is_finite() {
            warn!("trial {seed} ({}) diverged at t={:.1}", cfg.follower_mode.name(), trial.time());
            diverged = true;
            break;
        }
        if trial.step >= steps {
            break;
        }
        match trial.advance() {
            Ok(()) => {}
            Err(Error::NonFinite(_)) | Err(Error::Singular(_)) => {
                warn!("trial {seed} ({}) filter failure at t={:.1}", cfg.follower_mode.name(), trial.time());
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let summary = AxisTable::from_axes([0, 1, 2].map(|k| axes[k].finish(cfg.ekf.dt)));
    Ok(TrialResult {
        mode: cfg.follower_mode,
        seed,
        diverged,
        planner_fallbacks: trial.planner_fallbacks,
        covariance_repairs: trial.belief.repairs,
        min_range,
        max_range,
        summary,
        series,
    })
}

/// Trials of one mode and their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeResult {
    pub mode: FollowerMode,
    pub trials: Vec<TrialResult>,
    pub aggregate: AxisTable,
    pub diverged: usize,
}

/// Combines trial summaries: extreme min/max, mean RMS and mean area.
pub fn aggregate(trials: &[TrialResult]) -> AxisTable {
    let n = trials.len().max(1) as f64;
    let per_axis = |k: usize| {
        let axes: Vec<AxisSummary> = trials.iter().map(|t| t.summary.axes()[k]).collect();
        AxisSummary {
            min: axes.iter().map(|a| a.min).fold(f64::INFINITY, f64::min),
            max: axes.iter().map(|a| a.max).fold(0.0, f64::max),
            rms: axes.iter().map(|a| a.rms).sum::<f64>() / n,
            area3sigma: axes.iter().map(|a| a.area3sigma).sum::<f64>() / n,
        }
    };
    AxisTable::from_axes([per_axis(0), per_axis(1), per_axis(2)])
}

/// Runs `cfg.trials` trials for every mode over the same seeds.
pub fn run_campaign(cfg: &ScenarioConfig, modes: &[FollowerMode]) -> Result<Vec<ModeResult>> {
    if modes.is_empty() {
        return Err(Error::Config("at least one follower mode is required".into()));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = modes
        .iter()
        .enumerate()
        .flat_map(|(m, _)| (0..cfg.trials).map(move |i| (m, i)))
        .map(|(m, i)| (m, cfg.seed_for(i)))
        .collect();
    let results: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let mut c = cfg.clone();
            c.follower_mode = modes[m];
            run_trial(&c, seed)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(modes.len());
    let mut rest = results.into_iter();
    for &mode in modes {
        let trials: Vec<TrialResult> = rest.by_ref().take(cfg.trials).collect();
        let diverged = trials.iter().filter(|t| t.diverged).count();
        out.push(ModeResult {
            mode,
            aggregate: aggregate(&trials),
            trials,
            diverged,
        });
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub const TRIAL_CSV_HEADER: &str = "t,truth_rx,truth_ry,truth_rz,truth_vx,truth_vy,truth_vz,\
est_rx,est_ry,est_rz,est_vx,est_vy,est_vz,err_x,err_y,err_z,sigma_x,sigma_y,sigma_z";

pub fn trial_csv(series: &TrialSeries) -> String {
    let mut out = String::from(TRIAL_CSV_HEADER);
    out.push('\n');
    for i in 0..series.len() {
        let truth = &series.truth[i];
        let est = &series.estimate[i];
        let err = series.position_error(i);
        let sigma = series.position_sigma(i);
        let mut row = vec![series.t[i]];
        row.extend(truth.r.iter().chain(truth.v.iter()));
        row.extend(est.r.iter().chain(est.v.iter()));
        row.extend(err.iter());
        row.extend(sigma);
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_trial_csv(path: &Path, series: &TrialSeries) -> Result<()> {
    write_file(path, &trial_csv(series))
}

/// One row per trial with its per-axis summary.
pub fn campaign_csv(results: &[ModeResult]) -> String {
    let mut out = String::from("mode,seed,diverged,planner_fallbacks");
    for axis in ["x", "y", "z"] {
        for f in ["min", "max", "rms", "area3sigma"] {
            let _ = write!(out, ",{axis}_{f}");
        }
    }
    out.push('\n');
    for m in results {
        for t in &m.trials {
            let _ = write!(out, "{},{},{},{}", m.mode.name(), t.seed, t.diverged as u8, t.planner_fallbacks);
            for a in t.summary.axes() {
                let _ = write!(out, ",{:.16e},{:.16e},{:.16e},{:.16e}", a.min, a.max, a.rms, a.area3sigma);
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct ModeJson<'a> {
    trials: usize,
    diverged: usize,
    #[serde(flatten)]
    axes: &'a AxisTable,
}

/// `{mode: {trials, diverged, x: {...}, y: {...}, z: {...}}}` in mode order.
pub fn campaign_json(results: &[ModeResult]) -> Result<String> {
    let mut map = serde_json::Map::new();
    for m in results {
        let v = serde_json::to_value(ModeJson {
            trials: m.trials.len(),
            diverged: m.diverged,
            axes: &m.aggregate,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        map.insert(m.mode.name().to_string(), v);
    }
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_campaign(dir: &Path, results: &[ModeResult]) -> Result<()> {
    write_file(&dir.join("trials.csv"), &campaign_csv(results))?;
    write_file(&dir.join("campaign.json"), &campaign_json(results)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn short(mode: FollowerMode, duration: f64) -> ScenarioConfig {
        ScenarioConfig {
            duration,
            follower_mode: mode,
            trials: 1,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn area_of_constant_sigma() {
        let ones = vec![1.0; 101];
        assert_relative_eq!(metric_3sigma_area(&ones, 0.1).unwrap(), 30.0, epsilon = 1e-12);
        assert_eq!(metric_3sigma_area(&[0.0; 50], 0.1).unwrap(), 0.0);
        assert!(metric_3sigma_area(&[1.0, -1.0], 0.1).is_err());
    }

    #[test]
    fn area_of_linear_sigma() {
        let dt = 1e-3;
        let s: Vec<f64> = (0..=1000).map(|i| i as f64 * dt).collect();
        assert!((metric_3sigma_area(&s, dt).unwrap() - 1.5).abs() < 1e-4);
    }

    #[test]
    fn zigzag_is_a_triangle_wave() {
        let z = Zigzag::default();
        assert_eq!(z.offset(0.0).0, 0.0);
        assert_relative_eq!(z.offset(2.0).0, 2.0, epsilon = 1e-12);
        assert_relative_eq!(z.offset(6.0).0, -2.0, epsilon = 1e-12);
        assert_relative_eq!(z.offset(8.0).0, 0.0, epsilon = 1e-12);
        assert_relative_eq!(z.offset(1.0).1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(z.offset(4.0).1, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_straight_flight_has_no_error() {
        let cfg = ScenarioConfig {
            inject_noise: false,
            sample_initial_error: false,
            ..short(FollowerMode::Straight, 20.0)
        };
        let res = run_trial(&cfg, 3).unwrap();
        assert!(!res.diverged);
        assert_eq!(res.series.len(), 201);
        for i in 0..res.series.len() {
            assert!(res.series.position_error(i).norm() < 1e-6);
        }
    }

    #[test]
    fn series_lengths_agree_and_rms_is_nonnegative() {
        let res = run_trial(&short(FollowerMode::Zigzag, 5.0), 1).unwrap();
        let s = &res.series;
        assert_eq!(s.t.len(), 51);
        assert_eq!(s.truth.len(), s.t.len());
        assert_eq!(s.estimate.len(), s.t.len());
        assert_eq!(s.covariance_diagonal.len(), s.t.len());
        for a in res.summary.axes() {
            assert!(a.rms >= 0.0 && a.min <= a.max);
        }
    }

    #[test]
    fn streaming_and_batch_metrics_agree() {
        let res = run_trial(&short(FollowerMode::Straight, 10.0), 5).unwrap();
        let s = &res.series;
        for (k, axis) in res.summary.axes().iter().enumerate() {
            let err: Vec<f64> = (0..s.len()).map(|i| s.position_error(i)[k]).collect();
            assert!((rms(&err) - axis.rms).abs() <= 1e-12 * axis.rms.max(1e-300));
            let sig: Vec<f64> = (0..s.len()).map(|i| s.position_sigma(i)[k]).collect();
            assert_relative_eq!(metric_3sigma_area(&sig, 0.1).unwrap(), axis.area3sigma, max_relative = 1e-12);
            let abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
            assert_eq!(abs.iter().cloned().fold(f64::INFINITY, f64::min), axis.min);
            assert_eq!(abs.iter().cloned().fold(0.0, f64::max), axis.max);
        }
    }

    #[test]
    fn updates_leave_velocity_information_unchanged() {
        let cfg = short(FollowerMode::Straight, 3.0);
        let mut trial = Trial::new(&cfg, 11).unwrap();
        for _ in 0..20 {
            trial.advance().unwrap();
            let prior = trial.prior.as_ref().unwrap();
            let info_prior = prior.covariance.clone().try_inverse().unwrap();
            let info_post = trial.belief.covariance.clone().try_inverse().unwrap();
            let vv_prior = info_prior.view((7, 7), (3, 3));
            let vv_post = info_post.view((7, 7), (3, 3));
            let scale = vv_prior.norm();
            assert!((vv_post - vv_prior).norm() <= 1e-6 * scale, "velocity information changed");
        }
    }

    #[test]
    fn trials_are_deterministic_per_seed() {
        let cfg = short(FollowerMode::Zigzag, 4.0);
        let a = run_trial(&cfg, 9).unwrap();
        let b = run_trial(&cfg, 9).unwrap();
        assert_eq!(trial_csv(&a.series), trial_csv(&b.series));
        let c = run_trial(&cfg, 10).unwrap();
        assert_ne!(trial_csv(&a.series), trial_csv(&c.series));
    }

    #[test]
    fn modes_share_noise_realizations() {
        let cfg = short(FollowerMode::Straight, 1.0);
        let mut draws = Vec::new();
        for mode in [FollowerMode::Straight, FollowerMode::Zigzag] {
            let c = ScenarioConfig { follower_mode: mode, ..cfg.clone() };
            let mut trial = Trial::new(&c, 4).unwrap();
            let init = trial.belief.mean;
            for _ in 0..5 {
                trial.advance().unwrap();
            }
            let mut input = trial.streams.input.clone();
            let mut obs = trial.streams.observation.clone();
            let next: (f64, f64) = (StandardNormal.sample(&mut input), StandardNormal.sample(&mut obs));
            draws.push((init, trial.noise_path.clone().unwrap(), next));
        }
        assert_eq!(draws[0].0, draws[1].0);
        assert_eq!(draws[0].1, draws[1].1);
        assert_eq!(draws[0].2, draws[1].2);
    }

    #[test]
    fn observation_noise_has_configured_variance() {
        let cfg = ScenarioConfig::default();
        let spec = cfg.observation_noise_spec().unwrap();
        let factor = sigma_factor(&spec) / observation_noise_gain(&cfg, &spec).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sum = [0.0; 4];
        let windows = 2000;
        for _ in 0..windows {
            let path = sample_path_with(&spec, &factor, &mut rng);
            for k in 0..10 {
                let v = path.eval((k as f64 + 0.5) * 0.1).unwrap();
                for i in 0..4 {
                    sum[i] += v[i] * v[i];
                }
            }
        }
        let n = (windows * 10) as f64;
        let expect = [cfg.ekf.range_var, cfg.ekf.attitude_var, cfg.ekf.attitude_var, cfg.ekf.attitude_var];
        for i in 0..4 {
            let ratio = sum[i] / n / expect[i];
            assert!((ratio - 1.0).abs() < 0.1, "component {i}: variance ratio {ratio}");
        }
    }

    #[test]
    fn single_trial_campaign_matches_trial() {
        let cfg = short(FollowerMode::Straight, 3.0);
        let res = run_campaign(&cfg, &[FollowerMode::Straight]).unwrap();
        let trial = run_trial(&cfg, cfg.seed_for(0)).unwrap();
        assert_eq!(res[0].aggregate, trial.summary);
        assert!(run_campaign(&cfg, &[]).is_err());
    }

    #[test]
    fn campaign_outputs_are_well_formed() {
        let cfg = ScenarioConfig { trials: 2, ..short(FollowerMode::Straight, 1.0) };
        let res = run_campaign(&cfg, &[FollowerMode::Straight, FollowerMode::Zigzag]).unwrap();
        let csv = campaign_csv(&res);
        assert_eq!(csv.lines().count(), 5);
        let json: serde_json::Value = serde_json::from_str(&campaign_json(&res).unwrap()).unwrap();
        assert!(json["zigzag"]["y"]["area3sigma"].as_f64().unwrap() > 0.0);
        assert_eq!(json["straight"]["trials"], 2);
    }

    #[test]
    fn opc_trial_respects_range_bounds() {
        let mut cfg = short(FollowerMode::Opc, 4.0);
        cfg.inject_noise = false;
        cfg.sample_initial_error = false;
        cfg.opc.solver.max_iterations = 2;
        cfg.opc.solver.max_penalty_updates = 1;
        let res = run_trial(&cfg, 0).unwrap();
        let [lo, hi] = cfg.opc.range_bounds;
        assert!(!res.diverged);
        assert_eq!(res.planner_fallbacks, 0);
        assert!(res.min_range >= lo && res.max_range <= hi, "{} {}", res.min_range, res.max_range);
    }

    #[test]
    fn config_validation_and_round_trip() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"duraton": 1}"#).is_err());
        let partial: ScenarioConfig = serde_json::from_str(r#"{"duration": 7, "follower_mode": "opc"}"#).unwrap();
        assert_eq!(partial.follower_mode, FollowerMode::Opc);
        for broken in [
            ScenarioConfig { duration: 0.0, ..cfg.clone() },
            ScenarioConfig { trials: 0, ..cfg.clone() },
            ScenarioConfig { truth_dt: 0.03, ..cfg.clone() },
            ScenarioConfig { replan_stages: 0, ..cfg.clone() },
            ScenarioConfig { initial_covariance: DMatrix::zeros(10, 10), ..cfg.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn streaming_rms_matches_batch(v in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let mut s = RunningRms::default();
            for x in &v {
                s.push(*x);
            }
            let b = rms(&v);
            prop_assert!((s.value() - b).abs() <= 1e-12 * b.max(1e-300));
        }

        #[test]
        fn area_is_additive_over_splits(v in proptest::collection::vec(0.0f64..5.0, 3..100), cut in 1usize..50) {
            let cut = cut.min(v.len() - 2);
            let whole = metric_3sigma_area(&v, 0.1).unwrap();
            let parts = metric_3sigma_area(&v[..=cut], 0.1).unwrap() + metric_3sigma_area(&v[cut..], 0.1).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
        }
    }
}
