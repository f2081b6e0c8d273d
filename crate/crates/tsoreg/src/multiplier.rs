//! Wild-bootstrap multiplier process, simultaneous confidence bands, and the
//! weighted Kolmogorov-Smirnov covariate test.
//!
//! Each bootstrap draw multiplies the fixed per-unit influence curves by iid
//! standard normals. Draw `b` uses its own derived substream, so sups,
//! critical values, and p-values are bit-identical for any worker count.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::inference::InfluencePath;
use crate::rng::substream;
use crate::solver::FitResult;

#[derive(Debug, Error)]
pub enum MultiplierError {
    #[error("no estimable grid points with positive variance in [{0}, {1}]")]
    EmptyDomain(f64, f64),
    #[error("alpha must be in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("need at least {min} bootstrap draws, got {got}")]
    TooFewDraws { min: usize, got: usize },
    #[error("coefficient index {index} out of range for {dim} coefficients")]
    BadCoefficient { index: usize, dim: usize },
    #[error("fit and influence paths have different grids")]
    GridMismatch,
}

/// One realisation of the multiplier process for a coefficient.
#[derive(Debug, Clone)]
pub struct MultiplierDraw {
    /// One standard-normal multiplier per inference unit.
    pub xi: Vec<f64>,
    /// `W_l(t) = n^{-1/2} sum_i Phi_il(t) xi_i` per grid point; `None` where
    /// the point is not estimable.
    pub w_path: Vec<Option<f64>>,
}

/// Simultaneous confidence band for one coefficient on a restricted domain.
#[derive(Debug, Clone)]
pub struct BandResult {
    pub coefficient: usize,
    pub domain: (f64, f64),
    pub c_alpha: f64,
    pub alpha: f64,
    pub b_draws: usize,
    /// Restricted-grid support of the band.
    pub times: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid points inside the domain dropped for non-estimability.
    pub excluded: usize,
}

impl BandResult {
    /// True iff the band excludes zero somewhere on its domain.
    pub fn excludes_zero(&self) -> bool {
        self.lower
            .iter()
            .zip(&self.upper)
            .any(|(lo, up)| *lo > 0.0 || *up < 0.0)
    }
}

/// Weighted Kolmogorov-Smirnov test of `H0: beta_l(.) = 0` on a domain.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub coefficient: usize,
    pub k_stat: f64,
    pub p_value: f64,
    pub b_draws: usize,
    pub domain: (f64, f64),
    pub excluded: usize,
}

/// Row-major `n_draws x n_units` multiplier matrix; row `b` comes from
/// `substream(seed, b)`, so draws are schedule-independent. One matrix is
/// shared across the coefficients of a run (Algorithms draw one multiplier
/// set per b, reused for every coefficient).
pub fn multiplier_matrix(n_units: usize, n_draws: usize, seed: u64) -> std::sync::Arc<[f64]> {
    let mut xi = vec![0.0; n_draws * n_units];
    for (b, row) in xi.chunks_exact_mut(n_units).enumerate() {
        let mut rng = substream(seed, b as u64);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    xi.into()
}

/// Running per-draw suprema of `|q_l(t) W_l(t)|` over grid points pushed so
/// far. Grid points are buffered in transposed blocks so one pass over the
/// multiplier matrix covers `BLOCK` points.
pub struct SupAccumulator {
    n_units: usize,
    n_draws: usize,
    xi: std::sync::Arc<[f64]>,
    sups: Vec<f64>,
    buf: Vec<f64>,
    buf_cols: usize,
    parallel: bool,
}

// Grid points buffered per sweep of the multiplier matrix; larger blocks
// amortize memory traffic over more arithmetic (the matrix can reach tens of
// MB when subjects are the inference units).
const BLOCK: usize = 32;

impl SupAccumulator {
    pub fn new(n_units: usize, n_draws: usize, seed: u64, parallel: bool) -> Self {
        Self::from_shared(multiplier_matrix(n_units, n_draws, seed), n_units, parallel)
    }

    /// Build on a pre-generated multiplier matrix (shared across
    /// coefficients).
    pub fn from_shared(xi: std::sync::Arc<[f64]>, n_units: usize, parallel: bool) -> Self {
        let n_draws = xi.len() / n_units;
        SupAccumulator {
            n_units,
            n_draws,
            xi,
            sups: vec![0.0; n_draws],
            buf: vec![0.0; n_units * BLOCK],
            buf_cols: 0,
            parallel,
        }
    }

    /// Push one grid point's scaled influence column
    /// (`q_l(t) * n^{-1/2} * Phi_{.,l}(t)`).
    pub fn push(&mut self, scaled: &[f64]) {
        debug_assert_eq!(scaled.len(), self.n_units);
        let k = self.buf_cols;
        for (i, &v) in scaled.iter().enumerate() {
            self.buf[i * BLOCK + k] = v;
        }
        self.buf_cols += 1;
        if self.buf_cols == BLOCK {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.buf_cols == 0 {
            return;
        }
        // zero the unused columns so they contribute |0| to the max
        if self.buf_cols < BLOCK {
            for i in 0..self.n_units {
                for k in self.buf_cols..BLOCK {
                    self.buf[i * BLOCK + k] = 0.0;
                }
            }
        }
        let n = self.n_units;
        let buf = &self.buf;
        let xi: &[f64] = &self.xi;
        if self.parallel && self.n_draws >= 64 {
            let chunk = 32;
            self.sups
                .par_chunks_mut(chunk)
                .zip(xi.par_chunks(chunk * n))
                .for_each(|(sups, rows)| sup_block(sups, rows, buf, n));
        } else {
            sup_block(&mut self.sups, xi, buf, n);
        }
        self.buf_cols = 0;
    }

    /// Final per-draw suprema.
    pub fn finish(mut self) -> Vec<f64> {
        self.flush();
        self.sups
    }
}

/// Update running sups for a batch of draws over one buffered block:
/// `sups[b] = max(sups[b], max_k |sum_i xi[b,i] * buf[i,k]|)`.
///
/// The wide path compiles the same loop with AVX2+FMA enabled; dispatch is a
/// per-machine constant, so outputs never depend on worker count.
fn sup_block(sups: &mut [f64], xi_rows: &[f64], buf: &[f64], n_units: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // SAFETY: feature availability checked at runtime.
            unsafe { sup_block_avx2(sups, xi_rows, buf, n_units) };
            return;
        }
    }
    sup_block_body(sups, xi_rows, buf, n_units);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn sup_block_avx2(sups: &mut [f64], xi_rows: &[f64], buf: &[f64], n_units: usize) {
    sup_block_body(sups, xi_rows, buf, n_units);
}

#[inline(always)]
fn sup_block_body(sups: &mut [f64], xi_rows: &[f64], buf: &[f64], n_units: usize) {
    for (sup, row) in sups.iter_mut().zip(xi_rows.chunks_exact(n_units)) {
        let mut acc = [0.0f64; BLOCK];
        for (&x, ph) in row.iter().zip(buf.chunks_exact(BLOCK)) {
            for k in 0..BLOCK {
                acc[k] += ph[k] * x;
            }
        }
        let mut m = *sup;
        for a in acc {
            m = m.max(a.abs());
        }
        *sup = m;
    }
}

/// The `ceil((1-alpha) * B)`-th order statistic of the sup sample.
pub fn critical_value(sups: &[f64], alpha: f64) -> f64 {
    let mut sorted = sups.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((1.0 - alpha) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Bootstrap p-value: the proportion of sups at or above the statistic.
/// The tie convention keeps p strictly positive.
pub fn p_value(sups: &[f64], k_stat: f64) -> f64 {
    let count = sups.iter().filter(|&&s| s >= k_stat).count();
    count as f64 / sups.len() as f64
}

/// Draw one multiplier realisation over the influence path's grid.
pub fn draw_w(infl: &InfluencePath, l: usize, seed: u64) -> Result<MultiplierDraw, MultiplierError> {
    let mut rng = substream(seed, 0);
    let xi: Vec<f64> = (0..infl.n_units)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    draw_w_with_xi(infl, l, xi)
}

/// Multiplier realisation from caller-supplied multipliers (used by tests
/// that force degenerate draws).
pub fn draw_w_with_xi(
    infl: &InfluencePath,
    l: usize,
    xi: Vec<f64>,
) -> Result<MultiplierDraw, MultiplierError> {
    if l >= infl.dim {
        return Err(MultiplierError::BadCoefficient {
            index: l,
            dim: infl.dim,
        });
    }
    let scale = 1.0 / (infl.n_units as f64).sqrt();
    let w_path = infl
        .phi
        .iter()
        .map(|block| {
            block.as_ref().map(|phi| {
                let mut acc = 0.0;
                for (i, &x) in xi.iter().enumerate() {
                    acc += phi[i * infl.dim + l] * x;
                }
                scale * acc
            })
        })
        .collect();
    Ok(MultiplierDraw { xi, w_path })
}

struct RestrictedGrid {
    /// Indices into the path grid.
    indices: Vec<usize>,
    q: Vec<f64>,
    excluded: usize,
}

fn restrict(
    fit: &FitResult,
    infl: &InfluencePath,
    l: usize,
    domain: (f64, f64),
) -> Result<RestrictedGrid, MultiplierError> {
    if fit.grid.len() != infl.grid.len() {
        return Err(MultiplierError::GridMismatch);
    }
    if l >= infl.dim {
        return Err(MultiplierError::BadCoefficient {
            index: l,
            dim: infl.dim,
        });
    }
    let mut indices = Vec::new();
    let mut q = Vec::new();
    let mut excluded = 0usize;
    for (k, &t) in fit.grid.iter().enumerate() {
        if t < domain.0 || t > domain.1 {
            continue;
        }
        match (fit.points[k].is_estimable(), infl.q_weight_at(k, l)) {
            (true, Some(qk)) => {
                indices.push(k);
                q.push(qk);
            }
            _ => excluded += 1,
        }
    }
    if indices.is_empty() {
        return Err(MultiplierError::EmptyDomain(domain.0, domain.1));
    }
    Ok(RestrictedGrid {
        indices,
        q,
        excluded,
    })
}

fn sup_sample(
    infl: &InfluencePath,
    rg: &RestrictedGrid,
    l: usize,
    b_draws: usize,
    seed: u64,
    parallel: bool,
) -> Vec<f64> {
    let n = infl.n_units;
    let scale = 1.0 / (n as f64).sqrt();
    let mut acc = SupAccumulator::new(n, b_draws, seed, parallel);
    let mut scaled = vec![0.0; n];
    for (pos, &k) in rg.indices.iter().enumerate() {
        let phi = infl.phi[k].as_ref().expect("restricted to estimable");
        let c = rg.q[pos] * scale;
        for i in 0..n {
            scaled[i] = c * phi[i * infl.dim + l];
        }
        acc.push(&scaled);
    }
    acc.finish()
}

/// Simultaneous `1 - alpha` confidence band for coefficient `l` over
/// `domain` (absolute times, typically from the response-jump percentiles).
#[allow(clippy::too_many_arguments)]
pub fn confidence_band(
    fit: &FitResult,
    infl: &InfluencePath,
    l: usize,
    alpha: f64,
    b_draws: usize,
    domain: (f64, f64),
    seed: u64,
    parallel: bool,
) -> Result<BandResult, MultiplierError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MultiplierError::BadAlpha(alpha));
    }
    if b_draws < 100 {
        return Err(MultiplierError::TooFewDraws {
            min: 100,
            got: b_draws,
        });
    }
    let rg = restrict(fit, infl, l, domain)?;
    let sups = sup_sample(infl, &rg, l, b_draws, seed, parallel);
    let c_alpha = critical_value(&sups, alpha);
    let sqrt_n = (infl.n_units as f64).sqrt();
    let mut times = Vec::with_capacity(rg.indices.len());
    let mut estimate = Vec::with_capacity(rg.indices.len());
    let mut lower = Vec::with_capacity(rg.indices.len());
    let mut upper = Vec::with_capacity(rg.indices.len());
    for (pos, &k) in rg.indices.iter().enumerate() {
        let beta = fit.points[k].beta[l];
        let half = c_alpha / (sqrt_n * rg.q[pos]);
        times.push(fit.grid[k]);
        estimate.push(beta);
        lower.push(beta - half);
        upper.push(beta + half);
    }
    Ok(BandResult {
        coefficient: l,
        domain,
        c_alpha,
        alpha,
        b_draws,
        times,
        estimate,
        lower,
        upper,
        excluded: rg.excluded,
    })
}

/// Weighted KS test of `H0: beta_l(.) = 0` over `domain`.
pub fn ks_test(
    fit: &FitResult,
    infl: &InfluencePath,
    l: usize,
    b_draws: usize,
    domain: (f64, f64),
    seed: u64,
    parallel: bool,
) -> Result<TestResult, MultiplierError> {
    if b_draws == 0 {
        return Err(MultiplierError::TooFewDraws { min: 1, got: 0 });
    }
    let rg = restrict(fit, infl, l, domain)?;
    let sqrt_n = (infl.n_units as f64).sqrt();
    let mut k_stat = 0.0f64;
    for (pos, &k) in rg.indices.iter().enumerate() {
        let stat = (sqrt_n * rg.q[pos] * fit.points[k].beta[l]).abs();
        k_stat = k_stat.max(stat);
    }
    let sups = sup_sample(infl, &rg, l, b_draws, seed, parallel);
    Ok(TestResult {
        coefficient: l,
        k_stat,
        p_value: p_value(&sups, k_stat),
        b_draws,
        domain,
        excluded: rg.excluded,
    })
}
