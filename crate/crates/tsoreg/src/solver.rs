//! Pointwise solver for the weighted functional estimating equation.
//!
//! At each jump time the coefficient vector solves
//! `sum_i w_i sum_j s*r * f'(eta) * V(mu) * (y - mu) * x = 0`
//! by Fisher scoring with step-halving. For the logit family with canonical
//! variance weight this is exactly IRLS for a row-weighted logistic
//! regression. The path estimator is piecewise constant between jump times.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{jump_grid, AtRiskRule, DataError, PathScanner, Slice, State, StudyData};
use crate::link::{glm_terms, LinkFamily, VarianceWeight};

/// Coefficient magnitude beyond which a logistic fit is treated as separated
/// (the linear predictor is saturated at double precision well before this).
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("coefficient vector has length {got}, design width is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no rows with s*r = 1 at t={0}; point not estimable")]
    NoUsableRows(f64),
    #[error("weighted design is rank deficient at t={0}")]
    SingularDesign(f64),
    #[error("complete separation detected at t={0} (coefficients diverge)")]
    Separation(f64),
    #[error("non-finite values encountered during the solve at t={0}")]
    NonFinite(f64),
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("empty jump grid: study contains no event, censoring, or covariate times")]
    EmptyGrid,
}

/// Target population for cluster weighting, plus the independent-observations
/// comparator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Typical cluster member: clusters weighted by 1/M_i.
    #[default]
    Tcm,
    /// All cluster members: unweighted sum over subjects.
    Acm,
    /// Each subject treated as its own cluster (no dependence adjustment).
    Iid,
}

impl std::str::FromStr for WeightMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tcm" => Ok(WeightMode::Tcm),
            "acm" => Ok(WeightMode::Acm),
            "iid" => Ok(WeightMode::Iid),
            other => Err(format!("unknown weight mode `{other}` (expected tcm|acm|iid)")),
        }
    }
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightMode::Tcm => write!(f, "tcm"),
            WeightMode::Acm => write!(f, "acm"),
            WeightMode::Iid => write!(f, "iid"),
        }
    }
}

fn default_max_iter() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    #[serde(default)]
    pub link: LinkFamily,
    #[serde(default)]
    pub variance: VarianceWeight,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Convergence tolerance applied to both the Newton step sup-norm and the
    /// scaled score sup-norm.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Optional ridge added to the information matrix when stepping only;
    /// the reported information stays unpenalised.
    #[serde(default)]
    pub ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            link: LinkFamily::Logit,
            variance: VarianceWeight::Canonical,
            weight_mode: WeightMode::Tcm,
            max_iter: default_max_iter(),
            tol: default_tol(),
            ridge: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err("tol must be positive".into());
        }
        if self.max_iter == 0 {
            return Err("max_iter must be at least 1".into());
        }
        if self.ridge < 0.0 {
            return Err("ridge must be nonnegative".into());
        }
        Ok(())
    }
}

/// Number of independent inference units in a slice under a weight mode.
pub fn unit_count(slice: &Slice, mode: WeightMode) -> usize {
    match mode {
        WeightMode::Tcm | WeightMode::Acm => slice.n_clusters(),
        WeightMode::Iid => slice.n_rows(),
    }
}

#[inline]
fn row_weight(slice: &Slice, mode: WeightMode, row: usize) -> f64 {
    match mode {
        WeightMode::Tcm => 1.0 / slice.cluster_sizes[slice.cluster_of_row[row] as usize] as f64,
        WeightMode::Acm | WeightMode::Iid => 1.0,
    }
}

#[inline]
fn unit_of_row(slice: &Slice, mode: WeightMode, row: usize) -> usize {
    match mode {
        WeightMode::Tcm | WeightMode::Acm => slice.cluster_of_row[row] as usize,
        WeightMode::Iid => row,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Converged,
    NotConverged,
    Singular,
    Separated,
}

#[derive(Debug, Clone)]
pub struct PointFit {
    pub t: f64,
    /// Solution (or last iterate when not converged); empty when the point is
    /// singular or separated.
    pub beta: Vec<f64>,
    pub status: PointStatus,
    /// Rows with s*r = 1.
    pub n_eff: usize,
}

impl PointFit {
    pub fn is_estimable(&self) -> bool {
        self.status == PointStatus::Converged
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub grid: Vec<f64>,
    pub points: Vec<PointFit>,
    pub config: FitConfig,
    pub data_fingerprint: String,
}

impl FitResult {
    /// Piecewise-constant lookup: the point at the largest grid time <= `t`.
    pub fn point_at(&self, t: f64) -> Option<&PointFit> {
        let idx = self.grid.partition_point(|&g| g <= t);
        if idx == 0 {
            None
        } else {
            Some(&self.points[idx - 1])
        }
    }

    pub fn dim(&self) -> usize {
        self.points
            .iter()
            .find(|p| !p.beta.is_empty())
            .map(|p| p.beta.len())
            .unwrap_or(0)
    }
}

/// Result of one pointwise solve, carrying the information matrix needed by
/// the variance machinery.
pub struct PointSolve {
    pub fit: PointFit,
    /// Unpenalised information `sum_i w_i sum_j s*r*f'^2*V*x*x^T` at the final
    /// iterate; `None` when no iterate exists.
    pub info: Option<DMatrix<f64>>,
}

/// Row weights and inference-unit indices for a `(study, mode)` pair.
/// Membership never changes along a path, so these are computed once per
/// walk and shared by every pass.
pub(crate) struct RowContext {
    pub weights: Vec<f64>,
    pub units: Vec<u32>,
    pub n_units: usize,
}

impl RowContext {
    pub(crate) fn new(slice: &Slice, mode: WeightMode) -> Self {
        let n = slice.n_rows();
        let mut weights = Vec::with_capacity(n);
        let mut units = Vec::with_capacity(n);
        for row in 0..n {
            weights.push(row_weight(slice, mode, row));
            units.push(unit_of_row(slice, mode, row) as u32);
        }
        RowContext {
            weights,
            units,
            n_units: unit_count(slice, mode),
        }
    }
}

/// Dispatch a pass kernel on the (small) design width so the per-row loops
/// fully unroll; anything wider falls back to the dynamic version.
macro_rules! dispatch_dim {
    ($dim:expr, $kernel:ident, $dynamic:ident, ($($arg:expr),*)) => {
        match $dim {
            1 => $kernel::<1>($($arg),*),
            2 => $kernel::<2>($($arg),*),
            3 => $kernel::<3>($($arg),*),
            4 => $kernel::<4>($($arg),*),
            5 => $kernel::<5>($($arg),*),
            _ => $dynamic($($arg),*),
        }
    };
}

#[inline(always)]
fn score_info_kernel<const D: usize>(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    row_w: &[f64],
    active: &[u32],
    u: &mut [f64],
    j: &mut [f64],
) -> (f64, usize) {
    let mut coef = [0.0f64; D];
    coef.copy_from_slice(beta);
    let mut acc_u = [0.0f64; D];
    let mut acc_j = [[0.0f64; D]; D];
    let mut w_total = 0.0;
    let mut n_eff = 0usize;
    for &row in active {
        let row = row as usize;
        if slice.s[row] & slice.r[row] == 0 {
            continue;
        }
        n_eff += 1;
        let w = row_w[row];
        w_total += w;
        let x: &[f64; D] = slice.x[row * D..row * D + D].try_into().unwrap();
        let mut eta = 0.0;
        for k in 0..D {
            eta += coef[k] * x[k];
        }
        let terms = glm_terms(cfg.link, cfg.variance, eta);
        let su = w * terms.score_w * (f64::from(slice.y[row]) - terms.mu);
        let si = w * terms.info_w;
        for a in 0..D {
            acc_u[a] += su * x[a];
            let xa = si * x[a];
            for b in a..D {
                acc_j[a][b] += xa * x[b];
            }
        }
    }
    for a in 0..D {
        u[a] = acc_u[a];
        for b in a..D {
            j[a * D + b] = acc_j[a][b];
            j[b * D + a] = acc_j[a][b];
        }
    }
    (w_total, n_eff)
}

fn score_info_dynamic(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    row_w: &[f64],
    active: &[u32],
    u: &mut [f64],
    j: &mut [f64],
) -> (f64, usize) {
    let dim = slice.dim();
    u.iter_mut().for_each(|v| *v = 0.0);
    j.iter_mut().for_each(|v| *v = 0.0);
    let mut w_total = 0.0;
    let mut n_eff = 0usize;
    for &row in active {
        let row = row as usize;
        if slice.s[row] & slice.r[row] == 0 {
            continue;
        }
        n_eff += 1;
        let w = row_w[row];
        w_total += w;
        let x = slice.row_x(row);
        let mut eta = 0.0;
        for k in 0..dim {
            eta += beta[k] * x[k];
        }
        let terms = glm_terms(cfg.link, cfg.variance, eta);
        let su = w * terms.score_w * (f64::from(slice.y[row]) - terms.mu);
        let si = w * terms.info_w;
        for a in 0..dim {
            u[a] += su * x[a];
            let xa = si * x[a];
            for b in a..dim {
                j[a * dim + b] += xa * x[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            j[a * dim + b] = j[b * dim + a];
        }
    }
    (w_total, n_eff)
}

/// One pass over the active rows: score vector, information matrix, total
/// row weight, and effective row count at `beta`. Rows outside `active`
/// must have `s*r = 0` (they contribute exactly zero), so restricting the
/// pass leaves every sum bit-identical.
fn accumulate_ctx(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    ctx: &RowContext,
    active: &[u32],
    u: &mut [f64],
    j: &mut [f64],
) -> (f64, usize) {
    dispatch_dim!(
        slice.dim(),
        score_info_kernel,
        score_info_dynamic,
        (slice, beta, cfg, &ctx.weights, active, u, j)
    )
}

fn all_rows(slice: &Slice) -> Vec<u32> {
    (0..slice.n_rows() as u32).collect()
}

fn accumulate(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    u: &mut [f64],
    j: &mut [f64],
) -> (f64, usize) {
    let ctx = RowContext::new(slice, cfg.weight_mode);
    accumulate_ctx(slice, beta, cfg, &ctx, &all_rows(slice), u, j)
}

/// Unaveraged information matrix `sum_i w_i sum_j s*r*f'^2*V*x*x^T` at `beta`.
pub fn information_at(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
) -> Result<DMatrix<f64>, SolveError> {
    let dim = slice.dim();
    if beta.len() != dim {
        return Err(SolveError::DimensionMismatch {
            expected: dim,
            got: beta.len(),
        });
    }
    let mut u = vec![0.0; dim];
    let mut j = vec![0.0; dim * dim];
    accumulate(slice, beta, cfg, &mut u, &mut j);
    Ok(DMatrix::from_row_slice(dim, dim, &j))
}

/// The estimating function U(beta, t) for a slice, including cluster weights.
pub fn estimating_function(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
) -> Result<Vec<f64>, SolveError> {
    let dim = slice.dim();
    if beta.len() != dim {
        return Err(SolveError::DimensionMismatch {
            expected: dim,
            got: beta.len(),
        });
    }
    let mut u = vec![0.0; dim];
    let mut j = vec![0.0; dim * dim];
    accumulate(slice, beta, cfg, &mut u, &mut j);
    Ok(u)
}

#[inline(always)]
fn unit_score_kernel<const D: usize>(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    ctx: &RowContext,
    active: &[u32],
    out: &mut [f64],
) {
    let mut coef = [0.0f64; D];
    coef.copy_from_slice(beta);
    for &row in active {
        let row = row as usize;
        if slice.s[row] & slice.r[row] == 0 {
            continue;
        }
        let w = ctx.weights[row];
        let unit = ctx.units[row] as usize;
        let x: &[f64; D] = slice.x[row * D..row * D + D].try_into().unwrap();
        let mut eta = 0.0;
        for k in 0..D {
            eta += coef[k] * x[k];
        }
        let terms = glm_terms(cfg.link, cfg.variance, eta);
        let su = w * terms.score_w * (f64::from(slice.y[row]) - terms.mu);
        let dst = &mut out[unit * D..(unit + 1) * D];
        for k in 0..D {
            dst[k] += su * x[k];
        }
    }
}

fn unit_score_dynamic(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    ctx: &RowContext,
    active: &[u32],
    out: &mut [f64],
) {
    let dim = slice.dim();
    for &row in active {
        let row = row as usize;
        if slice.s[row] & slice.r[row] == 0 {
            continue;
        }
        let w = ctx.weights[row];
        let unit = ctx.units[row] as usize;
        let x = slice.row_x(row);
        let mut eta = 0.0;
        for k in 0..dim {
            eta += beta[k] * x[k];
        }
        let terms = glm_terms(cfg.link, cfg.variance, eta);
        let su = w * terms.score_w * (f64::from(slice.y[row]) - terms.mu);
        let dst = &mut out[unit * dim..(unit + 1) * dim];
        for k in 0..dim {
            dst[k] += su * x[k];
        }
    }
}

pub(crate) fn unit_scores_into_active(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    ctx: &RowContext,
    active: &[u32],
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), ctx.n_units * slice.dim());
    out.iter_mut().for_each(|v| *v = 0.0);
    dispatch_dim!(
        slice.dim(),
        unit_score_kernel,
        unit_score_dynamic,
        (slice, beta, cfg, ctx, active, out)
    )
}

pub(crate) fn unit_scores_into(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
    ctx: &RowContext,
    out: &mut [f64],
) {
    unit_scores_into_active(slice, beta, cfg, ctx, &all_rows(slice), out)
}

/// Per-unit weighted score sums `b_i = w_i sum_j A_ij` at `beta`, flattened
/// `n_units x dim`. The estimating function is their column sum.
pub fn unit_scores(slice: &Slice, beta: &[f64], cfg: &FitConfig) -> Result<Vec<f64>, SolveError> {
    let dim = slice.dim();
    if beta.len() != dim {
        return Err(SolveError::DimensionMismatch {
            expected: dim,
            got: beta.len(),
        });
    }
    let ctx = RowContext::new(slice, cfg.weight_mode);
    let mut out = vec![0.0; ctx.n_units * dim];
    unit_scores_into(slice, beta, cfg, &ctx, &mut out);
    Ok(out)
}

/// Default initial point: intercept at the link of the pooled weighted mean
/// response, slopes zero.
fn default_init(
    slice: &Slice,
    cfg: &FitConfig,
    ctx: &RowContext,
    active: &[u32],
) -> Result<Vec<f64>, SolveError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &row in active {
        let row = row as usize;
        if slice.s[row] & slice.r[row] == 0 {
            continue;
        }
        let w = ctx.weights[row];
        num += w * f64::from(slice.y[row]);
        den += w;
    }
    if den == 0.0 {
        return Err(SolveError::NoUsableRows(slice.t));
    }
    let mut beta = vec![0.0; slice.dim()];
    beta[0] = cfg.link.link(num / den);
    Ok(beta)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solve the estimating equation on one slice by Fisher scoring with
/// step-halving on the score norm.
pub fn solve_slice(
    slice: &Slice,
    cfg: &FitConfig,
    init: Option<&[f64]>,
) -> Result<PointSolve, SolveError> {
    let ctx = RowContext::new(slice, cfg.weight_mode);
    solve_slice_ctx(slice, cfg, init, &ctx, &all_rows(slice))
}

pub(crate) fn solve_slice_ctx(
    slice: &Slice,
    cfg: &FitConfig,
    init: Option<&[f64]>,
    ctx: &RowContext,
    active: &[u32],
) -> Result<PointSolve, SolveError> {
    let dim = slice.dim();
    let t = slice.t;
    let mut beta = match init {
        Some(b) if b.len() == dim => b.to_vec(),
        Some(b) => {
            return Err(SolveError::DimensionMismatch {
                expected: dim,
                got: b.len(),
            })
        }
        None => default_init(slice, cfg, ctx, active)?,
    };

    let mut u = vec![0.0; dim];
    let mut j = vec![0.0; dim * dim];
    let mut u_try = vec![0.0; dim];
    let mut j_try = vec![0.0; dim * dim];
    let (w_total, n_eff) = accumulate_ctx(slice, &beta, cfg, ctx, active, &mut u, &mut j);
    if n_eff == 0 {
        return Err(SolveError::NoUsableRows(t));
    }
    let score_scale = w_total.max(1.0);

    let mut converged = false;
    for _ in 0..cfg.max_iter {
        if !u.iter().all(|v| v.is_finite()) {
            return Err(SolveError::NonFinite(t));
        }
        let mut step_mat = DMatrix::from_row_slice(dim, dim, &j);
        if cfg.ridge > 0.0 {
            for k in 0..dim {
                step_mat[(k, k)] += cfg.ridge;
            }
        }
        let chol = step_mat
            .cholesky()
            .ok_or(SolveError::SingularDesign(t))?;
        let delta = chol.solve(&DVector::from_column_slice(&u));

        // Converged when the proposed correction and the score are both
        // negligible; the step is then not taken.
        if sup_norm(delta.as_slice()) <= cfg.tol * (1.0 + sup_norm(&beta))
            && sup_norm(&u) <= cfg.tol * score_scale
        {
            converged = true;
            break;
        }

        // Step-halving on the l2 score norm.
        let u_norm = l2_norm(&u);
        let mut scale = 1.0;
        let mut accepted = false;
        let mut beta_try = vec![0.0; dim];
        for _ in 0..25 {
            for k in 0..dim {
                beta_try[k] = beta[k] + scale * delta[k];
            }
            accumulate_ctx(slice, &beta_try, cfg, ctx, active, &mut u_try, &mut j_try);
            if l2_norm(&u_try) <= u_norm || u_norm <= cfg.tol * score_scale {
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // score cannot be decreased along the scoring direction
            break;
        }
        beta.copy_from_slice(&beta_try);
        std::mem::swap(&mut u, &mut u_try);
        std::mem::swap(&mut j, &mut j_try);

        if sup_norm(&beta) > SEPARATION_BOUND {
            return Err(SolveError::Separation(t));
        }
    }

    let status = if converged {
        PointStatus::Converged
    } else {
        PointStatus::NotConverged
    };
    Ok(PointSolve {
        fit: PointFit {
            t,
            beta,
            status,
            n_eff,
        },
        info: Some(DMatrix::from_row_slice(dim, dim, &j)),
    })
}

/// Solve at one time point (spec-level wrapper over [`solve_slice`]).
pub fn solve_at_time(
    slice: &Slice,
    cfg: &FitConfig,
    init: Option<&[f64]>,
) -> Result<PointFit, SolveError> {
    solve_slice(slice, cfg, init).map(|s| s.fit)
}

fn flagged_point(t: f64, n_eff: usize, err: &SolveError) -> PointFit {
    let status = match err {
        SolveError::Separation(_) => PointStatus::Separated,
        _ => PointStatus::Singular,
    };
    PointFit {
        t,
        beta: Vec::new(),
        status,
        n_eff,
    }
}

fn count_effective(slice: &Slice) -> usize {
    (0..slice.n_rows())
        .filter(|&row| slice.s[row] & slice.r[row] == 1)
        .count()
}

pub(crate) fn validate_target_state(data: &StudyData, h: State) -> Result<(), DataError> {
    if data.is_absorbing(h) {
        return Err(DataError::AbsorbingTarget(h));
    }
    if !data.state_space().contains(&h) {
        return Err(DataError::StateNotInSpace(h));
    }
    Ok(())
}

/// Per-point view handed to walk visitors: the fixed row context plus the
/// currently active (not permanently dead or censored) rows.
pub(crate) struct WalkView<'a> {
    pub ctx: &'a RowContext,
    pub active: &'a [u32],
}

/// Sequential fit over a set of ascending times, warm-starting each solve
/// from the previous converged solution. Per-point failures become flags,
/// never abort the path. The visitor sees every solved point in order.
///
/// Under the alive at-risk rule both indicators are monotone in `t`, so rows
/// that go inactive never return and are dropped from later passes (their
/// contributions are exactly zero, keeping all sums bit-identical).
pub(crate) fn walk_times<F>(
    data: &StudyData,
    h: State,
    cfg: &FitConfig,
    times: &[f64],
    mut visit: F,
) -> Result<Vec<PointFit>, FitError>
where
    F: FnMut(usize, &Slice, &PointSolve, WalkView<'_>),
{
    validate_target_state(data, h)?;
    let mut scanner = PathScanner::new(data, h, AtRiskRule::Alive);
    let mut slice = crate::data::slice_at(data, h, 0.0)?;
    let ctx = RowContext::new(&slice, cfg.weight_mode);
    let mut active: Vec<u32> = (0..slice.n_rows() as u32).collect();
    let mut points = Vec::with_capacity(times.len());
    let mut warm: Option<Vec<f64>> = None;
    let mut prev_t = f64::NEG_INFINITY;
    for (idx, &t) in times.iter().enumerate() {
        scanner.fill(&mut slice, t);
        if t < prev_t {
            // out-of-order query: pruned rows may be live again
            active = (0..slice.n_rows() as u32).collect();
        }
        prev_t = t;
        active.retain(|&row| slice.s[row as usize] & slice.r[row as usize] == 1);
        match solve_slice_ctx(&slice, cfg, warm.as_deref(), &ctx, &active) {
            Ok(solve) => {
                if solve.fit.status == PointStatus::Converged {
                    warm = Some(solve.fit.beta.clone());
                }
                visit(
                    idx,
                    &slice,
                    &solve,
                    WalkView {
                        ctx: &ctx,
                        active: &active,
                    },
                );
                points.push(solve.fit);
            }
            Err(err) => {
                points.push(flagged_point(t, count_effective(&slice), &err));
                warm = None;
            }
        }
    }
    Ok(points)
}

/// Fit the full coefficient path over the jump grid (sequential, warm-started).
pub fn fit_path(data: &StudyData, h: State, cfg: &FitConfig) -> Result<FitResult, FitError> {
    let grid = jump_grid(data, h)?;
    if grid.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    let points = walk_times(data, h, cfg, &grid, |_, _, _, _| {})?;
    Ok(FitResult {
        grid,
        points,
        config: cfg.clone(),
        data_fingerprint: data.fingerprint(),
    })
}

/// Fit the full coefficient path with independent cold-started solves, one
/// rayon task per grid point. Agrees with [`fit_path`] to solver tolerance;
/// output is identical for any worker count.
pub fn fit_path_parallel(
    data: &StudyData,
    h: State,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    use rayon::prelude::*;
    validate_target_state(data, h)?;
    let grid = jump_grid(data, h)?;
    if grid.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    let points: Vec<PointFit> = grid
        .par_iter()
        .map(|&t| {
            let slice = crate::data::slice_at(data, h, t).expect("state validated");
            match solve_slice(&slice, cfg, None) {
                Ok(solve) => solve.fit,
                Err(err) => flagged_point(t, count_effective(&slice), &err),
            }
        })
        .collect();
    Ok(FitResult {
        grid,
        points,
        config: cfg.clone(),
        data_fingerprint: data.fingerprint(),
    })
}

/// Fit only at the grid points governing the requested times: each time maps
/// to the largest jump-grid point at or before it. Times preceding every
/// jump have no governing point and are skipped, matching the
/// piecewise-constant lookup into the full path at a fraction of the cost.
pub fn fit_at_times(
    data: &StudyData,
    h: State,
    times: &[f64],
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    let grid = jump_grid(data, h)?;
    let mut mapped: Vec<f64> = times
        .iter()
        .filter_map(|&t| {
            let idx = grid.partition_point(|&g| g <= t);
            idx.checked_sub(1).map(|i| grid[i])
        })
        .collect();
    mapped.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mapped.dedup();
    let points = walk_times(data, h, cfg, &mapped, |_, _, _, _| {})?;
    Ok(FitResult {
        grid: mapped,
        points,
        config: cfg.clone(),
        data_fingerprint: data.fingerprint(),
    })
}
