//! Command-line front end. Every subcommand reads one JSON document, writes
//! its artifacts under the output directory and prints a one-line summary.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::estimator::{update, update_gain_form, Belief};
use crate::liealg::{taylor_flow, SmoothSystem};
use crate::model::{Cls, ControlInput, Observation, RelativeState};
use crate::noise::{legendre_basis, spectrum_check, NoiseSpec};
use crate::obsv::{
    asymptotic_scan, eq13_rank, index_lower_bound, local_index, log_oracle, log_spaced_horizons, stlog,
};
use crate::opc::{cls_state, solve, write_trace_csv, Plan};
use crate::quadrature::gauss_legendre_interval;
use crate::sim::{campaign_json, run_campaign, run_trial, trial_csv, write_campaign, FollowerMode, ScenarioConfig};
use crate::systems::{IntegratorChain, PlanarRangeOnly};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "stlog", version, about = "Observability-aware relative localization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,
    /// Overrides the configured seed(s).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Worker threads for trials and scans; defaults to all cores.
    #[arg(long, global = true, env = "STLOG_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// One closed-loop trial.
    Simulate,
    /// Monte Carlo trials over several follower modes.
    Campaign,
    /// One planner solve from the scenario's initial state.
    Plan,
    /// Rank and index checks of the relative model.
    Ranktest,
    /// Minimum Gramian eigenvalue against horizon, with a power-law fit.
    StlogScan,
    /// Empirical spectrum of the noise process.
    NoiseCheck,
    /// Quick invariant checks.
    Selftest,
}

impl Command {
    fn needs_config(self) -> bool {
        !matches!(self, Command::Selftest)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDocument {
    pub scenario: ScenarioConfig,
    /// Modes run by `campaign`.
    pub modes: Vec<FollowerMode>,
    pub ranktest: RanktestConfig,
    pub stlog_scan: ScanConfig,
    pub noise_check: NoiseCheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RanktestConfig {
    pub state: RelativeState,
    pub input: ControlInput,
    pub max_order: usize,
}

impl Default for RanktestConfig {
    fn default() -> Self {
        Self {
            state: RelativeState::new(
                Vector3::new(3.0, 0.5, -0.4),
                Vector4::new(0.05, -0.02, 0.1, 1.0).normalize(),
                Vector3::new(0.2, -0.3, 0.1),
            ),
            input: ControlInput {
                f_l: 9.9,
                w_l: Vector3::new(0.1, -0.2, 0.05),
                f_f: 9.7,
                w_f: Vector3::new(-0.05, 0.15, 0.2),
            },
            max_order: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ScanSystem {
    IntegratorChain { length: usize },
    PlanarRangeOnly,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub system: ScanSystem,
    /// Defaults to ones.
    pub state: Option<Vec<f64>>,
    /// Defaults to ones.
    pub input: Option<Vec<f64>>,
    pub order: usize,
    pub dt_max: f64,
    pub dt_min: f64,
    pub count: usize,
    /// Defaults to the identity.
    #[serde(default, with = "optional_rows")]
    pub metric: Option<DMatrix<f64>>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            system: ScanSystem::IntegratorChain { length: 2 },
            state: None,
            input: None,
            order: 3,
            dt_max: 0.1,
            dt_min: 1e-3,
            count: 12,
            metric: None,
        }
    }
}

mod optional_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref()
            .map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows: Option<Vec<Vec<f64>>> = Option::deserialize(d)?;
        rows.map(|rows| {
            let n = rows.len();
            let m = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != m) {
                return Err(serde::de::Error::custom("matrix rows must have equal length"));
            }
            Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
        })
        .transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCheckConfig {
    pub noise: NoiseSpec,
    pub paths: usize,
    pub seed: u64,
    /// Largest accepted relative deviation of a component variance.
    pub tolerance: f64,
}

impl Default for NoiseCheckConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSpec {
                horizon: 1.0,
                n_c: 8,
                alpha: 2.0,
                tail_coeffs: Vec::new(),
                sigma: DMatrix::identity(2, 2),
                n_trunc: 24,
            },
            paths: 10_000,
            seed: 0,
            tolerance: 0.05,
        }
    }
}

/// Failure of a subcommand, mapped to the process exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

/// Reads a configuration document; parse errors carry line and column.
pub fn load_config(path: &Path) -> std::result::Result<ConfigDocument, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn io(e: std::io::Error) -> Failure {
    Failure::Numerical(format!("i/o: {e}"))
}

fn write(dir: &Path, name: &str, contents: &str) -> std::result::Result<(), Failure> {
    std::fs::write(dir.join(name), contents).map_err(io)
}

/// Runs the parsed invocation and returns the summary line.
pub fn run(cli: &Cli) -> std::result::Result<String, Failure> {
    let doc = match (&cli.config, cli.command.needs_config()) {
        (Some(path), _) => load_config(path)?,
        (None, false) => ConfigDocument::default(),
        (None, true) => return Err(Failure::Config("--config is required for this subcommand".into())),
    };
    std::fs::create_dir_all(&cli.output_dir).map_err(io)?;
    let dir = cli.output_dir.as_path();
    match cli.command {
        Command::Simulate => simulate(&doc, dir, cli.seed),
        Command::Campaign => campaign(&doc, dir, cli.seed),
        Command::Plan => plan(&doc, dir),
        Command::Ranktest => ranktest(&doc.ranktest, dir),
        Command::StlogScan => stlog_scan(&doc.stlog_scan, dir),
        Command::NoiseCheck => noise_check(&doc.noise_check, dir, cli.seed),
        Command::Selftest => selftest(dir),
    }
}

fn axes_line(t: &crate::sim::AxisTable) -> String {
    let [x, y, z] = t.axes();
    format!(
        "rms=({:.4},{:.4},{:.4}) m area3sigma=({:.3},{:.3},{:.3}) m*s",
        x.rms, y.rms, z.rms, x.area3sigma, y.area3sigma, z.area3sigma
    )
}

fn simulate(doc: &ConfigDocument, dir: &Path, seed: Option<u64>) -> std::result::Result<String, Failure> {
    let cfg = ScenarioConfig { keep_series: true, ..doc.scenario.clone() };
    let seed = seed.unwrap_or_else(|| cfg.seed_for(0));
    let res = run_trial(&cfg, seed)?;
    write(dir, "trial.csv", &trial_csv(&res.series))?;
    let summary = serde_json::json!({
        "mode": res.mode,
        "seed": res.seed,
        "diverged": res.diverged,
        "planner_fallbacks": res.planner_fallbacks,
        "summary": res.summary,
    });
    write(dir, "summary.json", &(serde_json::to_string_pretty(&summary).map_err(|e| Failure::Numerical(e.to_string()))? + "\n"))?;
    Ok(format!(
        "simulate: mode={} seed={} diverged={} {}",
        res.mode.name(),
        seed,
        res.diverged,
        axes_line(&res.summary)
    ))
}

fn campaign(doc: &ConfigDocument, dir: &Path, seed: Option<u64>) -> std::result::Result<String, Failure> {
    let mut cfg = ScenarioConfig { keep_series: false, ..doc.scenario.clone() };
    if let Some(s) = seed {
        cfg.noise_seeds = (0..cfg.trials as u64).map(|i| s.wrapping_add(i)).collect();
    }
    let modes = if doc.modes.is_empty() {
        vec![FollowerMode::Straight, FollowerMode::Zigzag, FollowerMode::Opc]
    } else {
        doc.modes.clone()
    };
    let results = run_campaign(&cfg, &modes)?;
    write_campaign(dir, &results)?;
    let parts: Vec<String> = results
        .iter()
        .map(|m| format!("{} [{} diverged] {}", m.mode.name(), m.diverged, axes_line(&m.aggregate)))
        .collect();
    debug_assert!(campaign_json(&results).is_ok());
    Ok(format!("campaign: {} trials/mode; {}", cfg.trials, parts.join("; ")))
}

fn plan_csv(plan: &Plan) -> String {
    let m = plan.inputs.first().map_or(0, |u| u.len());
    let n = plan.states.first().map_or(0, |x| x.len());
    let mut out = String::from("stage");
    for j in 0..m {
        out.push_str(&format!(",u{j}"));
    }
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",lambda_min\n");
    for (k, x) in plan.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        match plan.inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| format!("{v:.16e}"))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        row.extend(x.iter().map(|v| format!("{v:.16e}")));
        row.push(plan.per_stage_lambda.get(k).map_or(String::new(), |l| format!("{l:.16e}")));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn plan(doc: &ConfigDocument, dir: &Path) -> std::result::Result<String, Failure> {
    let cfg = &doc.scenario;
    let x0 = cls_state(&cfg.initial_state);
    let plan = solve(&Cls, &x0, None, &cfg.opc)?;
    write(dir, "plan.csv", &plan_csv(&plan))?;
    write_trace_csv(&dir.join("trace.csv"), &plan.diagnostics.trace)?;
    Ok(format!(
        "plan: V={:.6e} cost={:.6e} iterations={} feasible={} max_violation={:.3e}",
        plan.objective_v, plan.cost, plan.diagnostics.iterations, plan.diagnostics.feasible, plan.diagnostics.max_violation
    ))
}

#[derive(Serialize)]
struct RanktestReport {
    eq13_rank: usize,
    local_index: Option<usize>,
    index_lower_bound: usize,
}

fn ranktest(cfg: &RanktestConfig, dir: &Path) -> std::result::Result<String, Failure> {
    let x = cfg.state;
    if !x.is_finite() || (x.q.norm() - 1.0).abs() > 1e-6 {
        return Err(Failure::Config("ranktest.state must be finite with a unit quaternion".into()));
    }
    let rank = eq13_rank(&x);
    let index = local_index(&Cls, &cls_state(&x), &cfg.input.to_array(), cfg.max_order)?;
    // Two attitude-free outputs (range, and a unit quaternion counted once)
    // against the six position and velocity directions.
    let bound = index_lower_bound(1, 6)?;
    let report = RanktestReport {
        eq13_rank: rank,
        local_index: index,
        index_lower_bound: bound,
    };
    write(dir, "ranktest.json", &(serde_json::to_string_pretty(&report).map_err(|e| Failure::Numerical(e.to_string()))? + "\n"))?;
    let idx = index.map_or("none".to_string(), |r| r.to_string());
    Ok(format!("ranktest: eq13_rank={rank} local_index={idx} index_lower_bound={bound}"))
}

fn scan_with<Sys: SmoothSystem + Sync>(
    sys: &Sys,
    cfg: &ScanConfig,
    dir: &Path,
) -> std::result::Result<String, Failure> {
    let x = cfg.state.clone().unwrap_or_else(|| vec![1.0; sys.state_dim()]);
    let u = cfg.input.clone().unwrap_or_else(|| vec![1.0; sys.input_dim()]);
    if x.len() != sys.state_dim() || u.len() != sys.input_dim() {
        return Err(Failure::Config(format!(
            "stlog_scan state/input must have {}/{} entries",
            sys.state_dim(),
            sys.input_dim()
        )));
    }
    let metric = cfg.metric.clone().unwrap_or_else(|| DMatrix::identity(sys.obs_dim(), sys.obs_dim()));
    if !(cfg.dt_min > 0.0 && cfg.dt_min < cfg.dt_max) || cfg.count < 2 {
        return Err(Failure::Config("stlog_scan needs 0 < dt_min < dt_max and count ≥ 2".into()));
    }
    let horizons = log_spaced_horizons(cfg.dt_max, cfg.dt_min, cfg.count);
    let scan = asymptotic_scan(sys, &x, &u, cfg.order, &horizons, &metric)?;
    scan.write_csv(&dir.join("stlog_scan.csv")).map_err(io)?;
    Ok(format!(
        "stlog-scan: r*={} fitted_exponent={:.4} expected={} fit_residual={:.2e} sandwich_holds={}",
        scan.r_star,
        scan.fitted_exponent,
        scan.expected_exponent(),
        scan.fit_residual,
        scan.all_bounds_hold()
    ))
}

fn stlog_scan(cfg: &ScanConfig, dir: &Path) -> std::result::Result<String, Failure> {
    match cfg.system {
        ScanSystem::IntegratorChain { length } if length >= 1 => scan_with(&IntegratorChain::new(length), cfg, dir),
        ScanSystem::IntegratorChain { .. } => Err(Failure::Config("integrator chain length must be ≥ 1".into())),
        ScanSystem::PlanarRangeOnly => scan_with(&PlanarRangeOnly, cfg, dir),
        ScanSystem::Cls => scan_with(&Cls, cfg, dir),
    }
}

fn noise_check(cfg: &NoiseCheckConfig, dir: &Path, seed: Option<u64>) -> std::result::Result<String, Failure> {
    cfg.noise.validate()?;
    let seed = seed.unwrap_or(cfg.seed);
    let check = spectrum_check(&cfg.noise, cfg.paths, seed)?;
    let mut out = String::from("component,axis,expected,empirical\n");
    for (n, (e, m)) in check.expected.iter().zip(&check.empirical).enumerate() {
        for i in 0..e.len() {
            out.push_str(&format!("{n},{i},{:.16e},{:.16e}\n", e[i], m[i]));
        }
    }
    write(dir, "noise_check.csv", &out)?;
    let band = check.max_band_deviation(cfg.noise.n_c);
    let tail = check.max_tail_deviation(cfg.noise.n_c);
    let line = format!("noise-check: paths={} max_band_dev={band:.4} max_tail_dev={tail:.4}", cfg.paths);
    if band > cfg.tolerance || tail > cfg.tolerance {
        return Err(Failure::Numerical(format!("{line} exceeds tolerance {}", cfg.tolerance)));
    }
    Ok(line)
}

fn random_cls_point(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut u = |a: f64, b: f64| rng.random_range(a..b);
    let r = Vector3::new(u(1.0, 5.0), u(-2.0, 2.0), u(-2.0, 2.0));
    let q = Vector4::new(u(-0.3, 0.3), u(-0.3, 0.3), u(-0.3, 0.3), 1.0).normalize();
    let v = Vector3::new(u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0));
    let x = cls_state(&RelativeState::new(r, q, v)).to_vec();
    let input = vec![u(8.0, 11.0), u(-0.5, 0.5), u(-0.5, 0.5), u(-0.5, 0.5), u(8.0, 11.0), u(-0.5, 0.5), u(-0.5, 0.5), u(-0.5, 0.5)];
    (x, input)
}

type Check = (&'static str, std::result::Result<String, String>);

fn check_flow(rng: &mut ChaCha8Rng) -> Result<std::result::Result<String, String>> {
    let (x, u) = random_cls_point(rng);
    let dt = 0.02;
    let coeffs = taylor_flow(&Cls, &x, &u, 8)?;
    let mut series = DVector::zeros(x.len());
    for c in coeffs.iter().rev() {
        series = series * dt + c;
    }
    let mut reference = x.clone();
    for _ in 0..20 {
        reference = crate::model::rk4_unprojected(&Cls, &reference, &u, dt / 20.0);
    }
    let err = (series - DVector::from_vec(reference)).amax();
    Ok(if err < 1e-9 { Ok(format!("max error {err:.2e}")) } else { Err(format!("max error {err:.2e}")) })
}

fn check_stlog_oracle(rng: &mut ChaCha8Rng) -> Result<std::result::Result<String, String>> {
    let (x, u) = random_cls_point(rng);
    let metric = DMatrix::identity(5, 5);
    let w = stlog(&Cls, &x, &u, 0.05, 5, &metric)?.matrix;
    let o = log_oracle(&Cls, &x, &u, 0.05, &metric, 12)?;
    let rel = (&w - &o).norm() / o.norm();
    Ok(if rel <= 1e-3 { Ok(format!("relative error {rel:.2e}")) } else { Err(format!("relative error {rel:.2e}")) })
}

fn check_hilbert_sandwich() -> Result<std::result::Result<String, String>> {
    let sys = IntegratorChain::new(3);
    let horizons = log_spaced_horizons(0.1, 1e-3, 8);
    let scan = asymptotic_scan(&sys, &[1.0, 1.0, 1.0], &[], 4, &horizons, &DMatrix::identity(1, 1))?;
    let ok = scan.all_bounds_hold() && (scan.fitted_exponent - 5.0).abs() <= 0.1;
    let msg = format!("exponent {:.3}, bounds hold {}", scan.fitted_exponent, scan.all_bounds_hold());
    Ok(if ok { Ok(msg) } else { Err(msg) })
}

fn check_legendre() -> std::result::Result<String, String> {
    let order = 12;
    let (nodes, weights) = gauss_legendre_interval(order + 1, 2.0);
    let basis = legendre_basis(2.0, order);
    let mut worst: f64 = 0.0;
    let vals: Vec<Vec<f64>> = nodes.iter().map(|&t| basis.eval(t)).collect();
    for i in 0..=order {
        for j in 0..=order {
            let g: f64 = vals.iter().zip(&weights).map(|(e, w)| e[i] * e[j] * w).sum::<f64>() / 2.0;
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - want).abs());
        }
    }
    if worst < 1e-12 {
        Ok(format!("max Gram deviation {worst:.2e}"))
    } else {
        Err(format!("max Gram deviation {worst:.2e}"))
    }
}

fn check_ekf_forms(rng: &mut ChaCha8Rng) -> Result<std::result::Result<String, String>> {
    let (x, _) = random_cls_point(rng);
    let mean = RelativeState::from_slice(&x);
    let a = DMatrix::from_fn(10, 10, |_, _| rng.random_range(-0.3..0.3));
    let cov = &a * a.transpose() + DMatrix::identity(10, 10) * 0.05;
    let b = Belief::new(mean, cov, 0.0)?;
    let mut y_state = mean;
    y_state.r += Vector3::new(0.05, -0.02, 0.03);
    let y = Observation {
        half_range_sq: 0.5 * y_state.r.norm_squared(),
        q_rel: mean.q,
    };
    let cfg = crate::estimator::EkfConfig::default();
    let info = update(&b, &y, &cfg)?.belief;
    let gain = update_gain_form(&b, &y, &cfg)?.belief;
    let dm = (info.mean.to_vector() - gain.mean.to_vector()).amax();
    let dp = (&info.covariance - &gain.covariance).amax() / gain.covariance.amax();
    let msg = format!("mean diff {dm:.2e}, covariance diff {dp:.2e}");
    Ok(if dm < 1e-8 && dp < 1e-8 { Ok(msg) } else { Err(msg) })
}

fn check_rank(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let (x, _) = random_cls_point(rng);
    let rank = eq13_rank(&RelativeState::from_slice(&x));
    if rank == 10 {
        Ok("rank 10".into())
    } else {
        Err(format!("rank {rank}"))
    }
}

fn check_planner_gradient() -> Result<std::result::Result<String, String>> {
    // A feasible toy plan must not get worse than its starting point.
    let mut cfg = crate::opc::OpcConfig {
        horizon_stages: 4,
        stage_dt: 0.2,
        stlog_order: 2,
        reg_c: 1e-6,
        input_lower: vec![-1.0, -1.0],
        input_upper: vec![1.0, 1.0],
        range_bounds: [0.5, 5.0],
        metric: DMatrix::identity(1, 1),
        nominal_input: None,
        solver: Default::default(),
    };
    cfg.solver.time_budget = 0.0;
    cfg.solver.max_iterations = 10;
    let plan = solve(&PlanarRangeOnly, &[1.0, 0.5], None, &cfg)?;
    let first = plan.diagnostics.trace.first().map_or(f64::INFINITY, |r| r.cost);
    let msg = format!("cost {first:.4e} -> {:.4e}", plan.cost);
    Ok(if plan.diagnostics.feasible && plan.cost <= first { Ok(msg) } else { Err(msg) })
}

/// Runs the quick checks; deterministic.
pub fn selftest_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let flatten = |r: Result<std::result::Result<String, String>>| r.unwrap_or_else(|e| Err(e.to_string()));
    vec![
        ("taylor flow vs RK4", flatten(check_flow(&mut rng))),
        ("gramian series vs quadrature", flatten(check_stlog_oracle(&mut rng))),
        ("eigenvalue sandwich and exponent", flatten(check_hilbert_sandwich())),
        ("legendre orthonormality", check_legendre()),
        ("information vs gain update", flatten(check_ekf_forms(&mut rng))),
        ("relative model rank", check_rank(&mut rng)),
        ("planner descent", flatten(check_planner_gradient())),
    ]
}

fn selftest(dir: &Path) -> std::result::Result<String, Failure> {
    let checks = selftest_checks();
    let mut report = String::new();
    let mut failed = Vec::new();
    for (name, outcome) in &checks {
        let (tag, msg) = match outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed.push(*name);
                ("FAIL", m)
            }
        };
        report.push_str(&format!("{tag} {name}: {msg}\n"));
    }
    write(dir, "selftest.txt", &report)?;
    if failed.is_empty() {
        Ok(format!("selftest: {} checks passed", checks.len()))
    } else {
        Err(Failure::Numerical(format!("selftest: failed {}", failed.join(", "))))
    }
}

/// Entry point used by the binary. Returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
