//! Plug-in influence curves, sandwich covariance, pointwise standard errors,
//! and the inverse-standard-error band weight.
//!
//! The population quantities are replaced by weighted empirical means
//! evaluated at the fitted coefficients: the information matrix is averaged
//! over inference units, each unit's aggregated influence is the inverse
//! information applied to its weighted score sum, and the covariance between
//! two time points is the average outer product of those influences.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::{Slice, State, StudyData};
use crate::solver::{
    unit_count, unit_scores, walk_times, FitConfig, FitError, FitResult, PointStatus, SolveError,
};

/// Condition-number guard for inverting the information matrix.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("information matrix is singular at t={0}")]
    SingularInformation(f64),
    #[error("information matrix is ill-conditioned at t={t} (cond ~ {cond:.3e})")]
    IllConditioned { t: f64, cond: f64 },
    #[error("variance estimation needs at least 2 inference units, got {0}")]
    TooFewUnits(usize),
    #[error("influence blocks have mismatched shapes")]
    ShapeMismatch,
}

/// Averaged information matrix at `beta`:
/// `(1/n) sum_i w_i sum_j s*r * f'(eta)^2 * V(mu) * x x^T`.
pub fn info_matrix(
    slice: &Slice,
    beta: &[f64],
    cfg: &FitConfig,
) -> Result<DMatrix<f64>, InferenceError> {
    let info = crate::solver::information_at(slice, beta, cfg)?;
    let n = unit_count(slice, cfg.weight_mode) as f64;
    Ok(info / n)
}

/// Invert with a 1-norm condition guard; thin extreme-time slices are
/// rejected rather than silently amplified.
pub fn guarded_inverse(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, InferenceError> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(InferenceError::SingularInformation(t))?;
    let inv = chol.inverse();
    let cond = one_norm(m) * one_norm(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(InferenceError::IllConditioned { t, cond });
    }
    Ok(inv)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for c in 0..m.ncols() {
        let s: f64 = m.column(c).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Per-unit aggregated influence vectors at one time point, flattened
/// `n_units x dim`: `Phi_i = H^{-1} (w_i sum_j A_ij)`.
pub fn influence(
    slice: &Slice,
    beta: &[f64],
    info: &DMatrix<f64>,
    cfg: &FitConfig,
) -> Result<Vec<f64>, InferenceError> {
    let inv = guarded_inverse(info, slice.t)?;
    let scores = unit_scores(slice, beta, cfg)?;
    let mut out = vec![0.0; scores.len()];
    apply_inverse(&inv, &scores, slice.dim(), &mut out);
    Ok(out)
}

/// Allocation-free variant for hot paths: unit scores land in `scores`,
/// influences in `phi` (both resized as needed), and only `active` rows are
/// visited (the rest contribute zero).
pub(crate) fn influence_into(
    slice: &Slice,
    beta: &[f64],
    info: &DMatrix<f64>,
    cfg: &FitConfig,
    view: &crate::solver::WalkView<'_>,
    scores: &mut Vec<f64>,
    phi: &mut Vec<f64>,
) -> Result<(), InferenceError> {
    let inv = guarded_inverse(info, slice.t)?;
    let len = view.ctx.n_units * slice.dim();
    scores.resize(len, 0.0);
    phi.resize(len, 0.0);
    crate::solver::unit_scores_into_active(slice, beta, cfg, view.ctx, view.active, scores);
    apply_inverse(&inv, scores, slice.dim(), phi);
    Ok(())
}

fn apply_inverse(inv: &DMatrix<f64>, scores: &[f64], dim: usize, out: &mut [f64]) {
    if dim == 3 {
        // hot case: unrolled with the inverse held in registers
        let m = [
            [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]],
            [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]],
            [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]],
        ];
        for (src, dst) in scores.chunks_exact(3).zip(out.chunks_exact_mut(3)) {
            for a in 0..3 {
                dst[a] = m[a][0] * src[0] + m[a][1] * src[1] + m[a][2] * src[2];
            }
        }
        return;
    }
    let n_units = scores.len() / dim;
    for i in 0..n_units {
        let src = &scores[i * dim..(i + 1) * dim];
        let dst = &mut out[i * dim..(i + 1) * dim];
        for a in 0..dim {
            let mut acc = 0.0;
            for b in 0..dim {
                acc += inv[(a, b)] * src[b];
            }
            dst[a] = acc;
        }
    }
}

/// The estimated covariance function evaluated at a pair of time points.
#[derive(Debug, Clone)]
pub struct CovarianceAtTimes {
    pub s: f64,
    pub t: f64,
    /// `Sigma(s, t)`; symmetric PSD on the diagonal `s == t`, and
    /// `Sigma(s, t) = Sigma(t, s)^T` off it.
    pub matrix: DMatrix<f64>,
}

/// Evaluate the covariance function between two grid indices of an
/// influence path.
pub fn covariance_between(
    infl: &InfluencePath,
    s_idx: usize,
    t_idx: usize,
) -> Result<CovarianceAtTimes, InferenceError> {
    let phi_s = infl.phi[s_idx].as_ref().ok_or(InferenceError::ShapeMismatch)?;
    let phi_t = infl.phi[t_idx].as_ref().ok_or(InferenceError::ShapeMismatch)?;
    Ok(CovarianceAtTimes {
        s: infl.grid[s_idx],
        t: infl.grid[t_idx],
        matrix: sandwich_cov(phi_s, phi_t, infl.dim)?,
    })
}

/// Covariance estimate between two time points from per-unit influences:
/// `(1/n) sum_i Phi_i(s) Phi_i(t)^T`.
pub fn sandwich_cov(
    phi_s: &[f64],
    phi_t: &[f64],
    dim: usize,
) -> Result<DMatrix<f64>, InferenceError> {
    if phi_s.len() != phi_t.len() || !phi_s.len().is_multiple_of(dim) {
        return Err(InferenceError::ShapeMismatch);
    }
    let n = phi_s.len() / dim;
    if n < 2 {
        return Err(InferenceError::TooFewUnits(n));
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let a = &phi_s[i * dim..(i + 1) * dim];
        let b = &phi_t[i * dim..(i + 1) * dim];
        for r in 0..dim {
            for c in 0..dim {
                cov[(r, c)] += a[r] * b[c];
            }
        }
    }
    cov /= n as f64;
    Ok(cov)
}

/// Influence curves and information matrices along a fitted path.
///
/// `phi[k]` is the flattened `n_units x dim` influence block at grid point
/// `k`, present only where the fit converged and the information inverted
/// cleanly.
#[derive(Debug, Clone)]
pub struct InfluencePath {
    pub grid: Vec<f64>,
    pub n_units: usize,
    pub dim: usize,
    pub phi: Vec<Option<Vec<f64>>>,
    pub info: Vec<Option<DMatrix<f64>>>,
}

impl InfluencePath {
    pub fn is_estimable(&self, idx: usize) -> bool {
        self.phi[idx].is_some()
    }

    /// sqrt of `Sigma_ll(t,t) / n` for each coefficient at grid index `idx`.
    pub fn se_at(&self, idx: usize) -> Option<Vec<f64>> {
        let phi = self.phi[idx].as_ref()?;
        let n = self.n_units as f64;
        let mut se = vec![0.0; self.dim];
        for (l, se_l) in se.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..self.n_units {
                let v = phi[i * self.dim + l];
                acc += v * v;
            }
            *se_l = (acc / n / n).sqrt();
        }
        Some(se)
    }

    /// The band weight `q_l(t) = {(1/n) sum_i Phi_il(t)^2}^{-1/2}`, i.e. the
    /// inverse of `sqrt(n) * se_l(t)`. `None` at degenerate zero-variance
    /// points, which are excluded from band domains.
    pub fn q_weight_at(&self, idx: usize, l: usize) -> Option<f64> {
        let phi = self.phi[idx].as_ref()?;
        let mut acc = 0.0;
        for i in 0..self.n_units {
            let v = phi[i * self.dim + l];
            acc += v * v;
        }
        let mean_sq = acc / self.n_units as f64;
        if mean_sq > 0.0 {
            Some(1.0 / mean_sq.sqrt())
        } else {
            None
        }
    }
}

/// Pointwise standard errors aligned with the fit grid; `None` where the
/// point is not estimable.
pub fn pointwise_se(fit: &FitResult, infl: &InfluencePath) -> Vec<Option<Vec<f64>>> {
    debug_assert_eq!(fit.grid.len(), infl.grid.len());
    (0..fit.grid.len()).map(|k| infl.se_at(k)).collect()
}

/// Fit the full path and materialise the influence curves in one sweep.
pub fn fit_with_influence(
    data: &StudyData,
    h: State,
    cfg: &FitConfig,
) -> Result<(FitResult, InfluencePath), FitError> {
    let grid = crate::data::jump_grid(data, h)?;
    if grid.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    fit_with_influence_at(data, h, cfg, grid)
}

/// Same as [`fit_with_influence`] but over caller-chosen ascending times.
pub fn fit_with_influence_at(
    data: &StudyData,
    h: State,
    cfg: &FitConfig,
    times: Vec<f64>,
) -> Result<(FitResult, InfluencePath), FitError> {
    let mut phi: Vec<Option<Vec<f64>>> = vec![None; times.len()];
    let mut info_out: Vec<Option<DMatrix<f64>>> = vec![None; times.len()];
    let mut n_units = 0usize;
    let mut dim = 0usize;
    let mut scores_buf = Vec::new();
    let points = walk_times(data, h, cfg, &times, |idx, slice, solve, view| {
        n_units = view.ctx.n_units;
        dim = slice.dim();
        if solve.fit.status != PointStatus::Converged {
            return;
        }
        if let Some(info) = &solve.info {
            let h_hat = info / n_units as f64;
            let mut phi_block = Vec::new();
            if influence_into(
                slice,
                &solve.fit.beta,
                &h_hat,
                cfg,
                &view,
                &mut scores_buf,
                &mut phi_block,
            )
            .is_ok()
            {
                phi[idx] = Some(phi_block);
                info_out[idx] = Some(h_hat);
            }
        }
    })?;
    Ok((
        FitResult {
            grid: times.clone(),
            points,
            config: cfg.clone(),
            data_fingerprint: data.fingerprint(),
        },
        InfluencePath {
            grid: times,
            n_units,
            dim,
            phi,
            info: info_out,
        },
    ))
}
