//! Observability matrices, the local observability index and the
//! short-term local observability Gramian.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::liealg::{lie_table, JetTable, SmoothSystem};
use crate::model::{rk4_unprojected, rot_mat_free, thrust_axis_jacobian, RelativeState};
use crate::quadrature::gauss_legendre_interval;

/// Singular values above `RANK_TOL · σ_max` count toward the rank.
pub const RANK_TOL: f64 = 1e-8;

/// Stacked gradients `D(L_fᵏ h)`, `k = 0..=order`.
#[derive(Clone, Debug)]
pub struct ObservabilityMatrix {
    pub order: usize,
    pub blocks: DMatrix<f64>,
    pub rank: usize,
    pub rank_tol: f64,
    /// Descending.
    pub singular_values: Vec<f64>,
}

impl ObservabilityMatrix {
    pub fn from_table(table: &JetTable) -> Self {
        let blocks = stack_gradients(&table.gradients);
        let singular_values = singular_values(&blocks);
        let rank = rank_of(&singular_values, RANK_TOL);
        Self {
            order: table.order,
            blocks,
            rank,
            rank_tol: RANK_TOL,
            singular_values,
        }
    }

    pub fn min_singular_value(&self) -> f64 {
        let n = self.blocks.ncols();
        if self.singular_values.len() < n {
            0.0
        } else {
            self.singular_values[n - 1]
        }
    }
}

fn stack_gradients(gradients: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = gradients[0].nrows();
    let n = gradients[0].ncols();
    let mut out = DMatrix::zeros(p * gradients.len(), n);
    for (k, g) in gradients.iter().enumerate() {
        out.view_mut((k * p, 0), (p, n)).copy_from(g);
    }
    out
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn rank_of(sv: &[f64], tol: f64) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

/// Numerical rank under the relative tolerance [`RANK_TOL`].
pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    rank_of(&singular_values(m), RANK_TOL)
}

pub fn obs_matrix<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    order: usize,
) -> Result<ObservabilityMatrix> {
    Ok(ObservabilityMatrix::from_table(&lie_table(sys, x, u, order)?))
}

/// Mixed-field observability matrix of the relative-motion model, 10×10.
///
/// Rows are the nonzero rows of `D h`, `D L_{f₀}(½d²)`, `D L²_{f₀}(½d²)`,
/// `D L_{f₁}L_{f₀}(½d²)`, `D L_{f₃}L_{f₀}(½d²)` and `D L_{f₃}L²_{f₀}(½d²)`.
pub fn eq13_matrix(x: &RelativeState) -> SMatrix<f64, 10, 10> {
    let mut m = SMatrix::<f64, 10, 10>::zeros();
    for i in 0..3 {
        m[(0, i)] = x.r[i];
    }
    for i in 0..4 {
        m[(1 + i, 3 + i)] = 1.0;
    }
    for i in 0..3 {
        m[(5, i)] = x.v[i];
        m[(5, 7 + i)] = x.r[i];
        m[(6, 7 + i)] = 2.0 * x.v[i];
    }
    // L_{f₁}L_{f₀}(½d²) = rᵀR(q)e₃, with q as free coordinates.
    let axis = rot_mat_free(&x.q) * Vector3::z();
    let rj = x.r.transpose() * thrust_axis_jacobian(&x.q);
    for i in 0..3 {
        m[(7, i)] = axis[i];
    }
    for i in 0..4 {
        m[(7, 3 + i)] = rj[i];
    }
    m[(8, 2)] = -1.0;
    m[(9, 9)] = -2.0;
    m
}

/// Rank of [`eq13_matrix`] under [`RANK_TOL`].
pub fn eq13_rank(x: &RelativeState) -> usize {
    matrix_rank(&DMatrix::from_column_slice(10, 10, eq13_matrix(x).as_slice()))
}

/// Smallest `r ≤ max_order` with `rank 𝒪⁽ʳ⁾ = state_dim`, or `None`.
pub fn local_index<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    max_order: usize,
) -> Result<Option<usize>> {
    let table = lie_table(sys, x, u, max_order)?;
    let n = sys.state_dim();
    for r in 0..=max_order {
        let om = ObservabilityMatrix::from_table(&table.truncated(r));
        if om.rank == n {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

/// Smallest `r` with `s·(r + 1) ≥ dim_z`.
pub fn index_lower_bound(s: usize, dim_z: usize) -> Result<usize> {
    if s == 0 || dim_z == 0 {
        return Err(Error::Precondition(format!(
            "index bound needs s ≥ 1 and dim_z ≥ 1, got s={s}, dim_z={dim_z}"
        )));
    }
    Ok(dim_z.div_ceil(s) - 1)
}

/// Symmetric positive-semidefinite Gramian with its spectrum.
#[derive(Clone, Debug)]
pub struct GramianReport {
    pub matrix: DMatrix<f64>,
    pub order: usize,
    pub horizon: f64,
    pub metric: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Columns match `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

impl GramianReport {
    pub fn norm(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0).abs()
    }

    pub fn min_eigenvector(&self) -> DVector<f64> {
        self.eigenvectors.column(0).into_owned()
    }
}

pub fn hilbert_block(order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(order + 1, order + 1, |i, j| 1.0 / (i + j + 1) as f64)
}

pub fn hilbert_min_eig(order: usize) -> f64 {
    let e = hilbert_block(order).symmetric_eigen();
    e.eigenvalues.min()
}

fn check_metric(metric: &DMatrix<f64>, p: usize) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if metric.nrows() != p || metric.ncols() != p {
        return Err(Error::Dimension(format!(
            "metric is {}×{}, observation dimension is {p}",
            metric.nrows(),
            metric.ncols()
        )));
    }
    let asym = (metric - metric.transpose()).norm();
    if asym > 1e-12 * metric.norm().max(1.0) {
        return Err(Error::Precondition("metric must be symmetric".into()));
    }
    Cholesky::new(metric.clone())
        .ok_or_else(|| Error::Precondition("metric must be positive definite".into()))
}

/// Gramian from a precomputed table.
///
/// With `Λ = diag(Tᵏ/k!)`, Hilbert block `H`, and stacked gradients `O`,
/// `W = T·Oᵀ Λ (H ⊗ M) Λ O`. The square-root factor
/// `F = √T·(L_H ⊗ L_M)ᵀ Λ O` gives `W = FᵀF` and its singular values give the
/// spectrum to full relative accuracy even when `λ_min ≪ ε‖W‖`.
pub fn stlog_from_table(table: &JetTable, horizon: f64, metric: &DMatrix<f64>) -> Result<GramianReport> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
    }
    let p = table.gradients[0].nrows();
    let n = table.gradients[0].ncols();
    let chol_m = check_metric(metric, p)?;
    let order = table.order;
    let mut scaled = Vec::with_capacity(order + 1);
    let mut lam = 1.0;
    for (k, g) in table.gradients.iter().enumerate() {
        if k > 0 {
            lam *= horizon / k as f64;
        }
        scaled.push(g * lam);
    }
    let stacked = stack_gradients(&scaled);

    let report = match Cholesky::new(hilbert_block(order)) {
        Some(chol_h) => {
            let l = chol_h.l().kronecker(&chol_m.l());
            let f = l.transpose() * &stacked * horizon.sqrt();
            gramian_from_factor(&f, n)
        }
        None => gramian_from_matrix(
            horizon * stacked.transpose() * hilbert_block(order).kronecker(metric) * &stacked,
        )?,
    };
    let (matrix, eigenvalues, eigenvectors) = report;
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observability Gramian"));
    }
    Ok(GramianReport {
        matrix,
        order,
        horizon,
        metric: metric.clone(),
        min_eigenvalue: eigenvalues[0],
        eigenvalues,
        eigenvectors,
    })
}

/// Mixing matrix `(L_H ⊗ L_M)ᵀ` of the square-root factor, where `L_H` and
/// `L_M` are the Cholesky factors of the Hilbert block and the metric.
pub fn gramian_mixing(order: usize, metric: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol_m = check_metric(metric, metric.nrows())?;
    let chol_h = Cholesky::new(hilbert_block(order)).ok_or(Error::Singular("Hilbert block"))?;
    Ok(chol_h.l().kronecker(&chol_m.l()).transpose())
}

/// Square-root factor `F` with `W = FᵀF` (see [`stlog_from_table`]).
pub fn gramian_factor(table: &JetTable, horizon: f64, metric: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
    }
    let p = table.gradients[0].nrows();
    check_metric(metric, p)?;
    let mixing = gramian_mixing(table.order, metric)?;
    let mut stacked = DMatrix::zeros(p * (table.order + 1), table.gradients[0].ncols());
    let mut lam = 1.0;
    for (k, g) in table.gradients.iter().enumerate() {
        if k > 0 {
            lam *= horizon / k as f64;
        }
        stacked.view_mut((k * p, 0), g.shape()).copy_from(&(g * lam));
    }
    Ok(mixing * stacked * horizon.sqrt())
}

type Spectrum = (DMatrix<f64>, Vec<f64>, DMatrix<f64>);

fn gramian_from_factor(f: &DMatrix<f64>, n: usize) -> Spectrum {
    // Reduce to the square triangular factor first. Singular values come from
    // a values-only decomposition: requesting vectors in the same call
    // occasionally loses relative accuracy in the smallest ones.
    let square = if f.nrows() > n {
        f.clone().qr().r()
    } else {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (f.nrows(), n)).copy_from(f);
        p
    };
    let mut eigenvalues: Vec<f64> = square
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s * s)
        .collect();
    eigenvalues.sort_by(f64::total_cmp);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let eigenvectors = DMatrix::from_fn(n, n, |i, j| v_t[(order[j], i)]);
    (f.transpose() * f, eigenvalues, eigenvectors)
}

fn gramian_from_matrix(w: DMatrix<f64>) -> Result<Spectrum> {
    let w = (&w + w.transpose()) * 0.5;
    let e = w.clone().symmetric_eigen();
    let n = w.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let eigenvalues: Vec<f64> = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let scale = eigenvalues.last().copied().unwrap_or(0.0).abs();
    if eigenvalues[0] < -1e-10 * scale {
        return Err(Error::Consistency(format!(
            "Gramian has eigenvalue {} below rounding level of {scale}",
            eigenvalues[0]
        )));
    }
    let eigenvectors = DMatrix::from_fn(n, n, |i, j| e.eigenvectors[(i, idx[j])]);
    Ok((w, eigenvalues, eigenvectors))
}

/// Short-term local observability Gramian of order `order` over `horizon`.
pub fn stlog<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    horizon: f64,
    order: usize,
    metric: &DMatrix<f64>,
) -> Result<GramianReport> {
    let table = lie_table(sys, x, u, order)?;
    stlog_from_table(&table, horizon, metric)
}

/// Brute-force Gramian `∫₀ᵀ DA_tᵀ M DA_t dt` by Gauss–Legendre quadrature,
/// with `DA_t` from central differences of the RK4 flow composed with `h`.
pub fn log_oracle<Sys: SmoothSystem>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    horizon: f64,
    metric: &DMatrix<f64>,
    n_quad: usize,
) -> Result<DMatrix<f64>> {
    if n_quad < 2 {
        return Err(Error::Precondition(format!("n_quad must be at least 2, got {n_quad}")));
    }
    if !(horizon > 0.0) {
        return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
    }
    let n = sys.state_dim();
    let p = sys.obs_dim();
    check_metric(metric, p)?;
    let (nodes, weights) = gauss_legendre_interval(n_quad, horizon);
    // Substeps between consecutive nodes keep the RK4 error far below the
    // finite-difference noise.
    let max_step = horizon / 400.0;

    let responses = |x0: &[f64]| -> Vec<DVector<f64>> {
        let mut state = x0.to_vec();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(nodes.len());
        let mut h = vec![0.0; p];
        for &tn in &nodes {
            let span = tn - t;
            let steps = (span / max_step).ceil().max(1.0) as usize;
            let dt = span / steps as f64;
            for _ in 0..steps {
                state = rk4_unprojected(sys, &state, u, dt);
            }
            t = tn;
            sys.observation(&state, &mut h);
            out.push(DVector::from_column_slice(&h));
        }
        out
    };

    let mut sens = vec![DMatrix::<f64>::zeros(p, n); nodes.len()];
    let mut xp = x.to_vec();
    for i in 0..n {
        let step = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let plus = responses(&xp);
        xp[i] = x[i] - step;
        let minus = responses(&xp);
        xp[i] = x[i];
        for (k, s) in sens.iter_mut().enumerate() {
            s.set_column(i, &((&plus[k] - &minus[k]) / (2.0 * step)));
        }
    }
    let mut w = DMatrix::zeros(n, n);
    for (s, wk) in sens.iter().zip(&weights) {
        w += s.transpose() * metric * s * *wk;
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observability Gramian oracle"));
    }
    Ok((&w + w.transpose()) * 0.5)
}

/// λ_min of the Gramian over a sequence of horizons with its log-log fit and
/// the two-sided bound.
#[derive(Clone, Debug, Serialize)]
pub struct AsymptoticsScan {
    pub horizons: Vec<f64>,
    pub min_eigs: Vec<f64>,
    pub lower_bounds: Vec<f64>,
    pub upper_bounds: Vec<f64>,
    pub fitted_exponent: f64,
    /// RMS residual of the log-log fit.
    pub fit_residual: f64,
    pub r_star: usize,
    pub order: usize,
    /// Per horizon: `lower ≤ λ_min ≤ upper`. Only evaluated for `ΔT ≤ 1`.
    pub sandwich_holds: Vec<bool>,
}

/// Maximum RMS residual of the log-log fit before the scan is flagged.
pub const FIT_RESIDUAL_TOL: f64 = 0.05;
/// Slack on the upper bound.
pub const UPPER_BOUND_SLACK: f64 = 0.01;

impl AsymptoticsScan {
    pub fn fit_ok(&self) -> bool {
        self.fit_residual <= FIT_RESIDUAL_TOL
    }

    pub fn all_bounds_hold(&self) -> bool {
        self.sandwich_holds.iter().all(|&b| b)
    }

    pub fn expected_exponent(&self) -> f64 {
        2.0 * self.r_star as f64 + 1.0
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "dt,lambda_min,lower_bound,upper_bound")?;
        for i in 0..self.horizons.len() {
            writeln!(
                f,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.horizons[i], self.min_eigs[i], self.lower_bounds[i], self.upper_bounds[i]
            )?;
        }
        f.flush()
    }
}

/// Least-squares slope and RMS residual of `ln y` against `ln x`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let res = (lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (b - icpt - slope * a).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    (slope, res)
}

/// Orthonormal basis of the numerical kernel of `m`.
fn kernel_basis(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut padded = DMatrix::zeros(m.nrows().max(n), n);
    padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..n)
        .filter(|&i| smax <= 0.0 || svd.singular_values[i] <= RANK_TOL * smax)
        .collect();
    DMatrix::from_fn(n, cols.len(), |i, j| v_t[(cols[j], i)])
}

pub fn asymptotic_scan<Sys: SmoothSystem + Sync>(
    sys: &Sys,
    x: &[f64],
    u: &[f64],
    order: usize,
    horizons: &[f64],
    metric: &DMatrix<f64>,
) -> Result<AsymptoticsScan> {
    if horizons.len() < 2 {
        return Err(Error::Precondition("scan needs at least two horizons".into()));
    }
    if horizons.iter().any(|&h| !(h > 0.0)) || horizons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Precondition(
            "horizons must be positive and strictly decreasing".into(),
        ));
    }
    let table = lie_table(sys, x, u, order)?;
    let n = sys.state_dim();
    let r_star = (0..=order)
        .find(|&r| ObservabilityMatrix::from_table(&table.truncated(r)).rank == n)
        .ok_or_else(|| {
            Error::Precondition(format!("system is not observable up to order {order}"))
        })?;

    let om_star = ObservabilityMatrix::from_table(&table.truncated(r_star));
    let sigma_min = om_star.min_singular_value();
    let restricted = if r_star == 0 {
        sigma_min
    } else {
        let prev = ObservabilityMatrix::from_table(&table.truncated(r_star - 1));
        let basis = kernel_basis(&prev.blocks, n);
        if basis.ncols() == 0 {
            sigma_min
        } else {
            let s = singular_values(&(&om_star.blocks * basis));
            s.last().copied().unwrap_or(0.0)
        }
    };
    let metric_eigs = metric.clone().symmetric_eigen().eigenvalues;
    let m_min = metric_eigs.min();
    let m_max = metric_eigs.max();
    let a_r = hilbert_min_eig(order);
    let fact: f64 = (1..=r_star).map(|k| k as f64).product();
    let expo = 2 * r_star as i32 + 1;

    let min_eigs: Vec<f64> = horizons
        .par_iter()
        .map(|&h| stlog_from_table(&table, h, metric).map(|g| g.min_eigenvalue))
        .collect::<Result<Vec<_>>>()?;
    let lower_bounds: Vec<f64> = horizons
        .iter()
        .map(|&h| a_r * m_min * h.powi(expo) * sigma_min * sigma_min / (fact * fact))
        .collect();
    let upper_bounds: Vec<f64> = horizons
        .iter()
        .map(|&h| {
            (1.0 + UPPER_BOUND_SLACK) * m_max * h.powi(expo) * restricted * restricted
                / (fact * fact * expo as f64)
        })
        .collect();
    let sandwich_holds = (0..horizons.len())
        .map(|i| {
            horizons[i] > 1.0
                || (lower_bounds[i] <= min_eigs[i] && min_eigs[i] <= upper_bounds[i])
        })
        .collect();
    let positive: Vec<(f64, f64)> = horizons
        .iter()
        .zip(&min_eigs)
        .filter(|(_, &l)| l > 0.0)
        .map(|(&h, &l)| (h, l))
        .collect();
    let (fitted_exponent, fit_residual) = if positive.len() >= 2 {
        let (hx, ly): (Vec<f64>, Vec<f64>) = positive.into_iter().unzip();
        log_log_fit(&hx, &ly)
    } else {
        (f64::NAN, f64::INFINITY)
    };
    Ok(AsymptoticsScan {
        horizons: horizons.to_vec(),
        min_eigs,
        lower_bounds,
        upper_bounds,
        fitted_exponent,
        fit_residual,
        r_star,
        order,
        sandwich_holds,
    })
}

/// `count` log-spaced horizons from `max` down to `min`.
pub fn log_spaced_horizons(max: f64, min: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && max > min && min > 0.0);
    let (a, b) = (max.ln(), min.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}
