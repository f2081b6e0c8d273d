//! Replication driver: simulate, fit, and aggregate pointwise accuracy,
//! simultaneous band coverage, and covariate-test rejection rates.
//!
//! Replicates are independent jobs with derived substreams; aggregation runs
//! in replicate order over Kahan-summed accumulators, so a report is
//! bit-identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{jump_grid, response_jump_percentiles};
use crate::dgp::{simulate_study, SimConfig, SimTruth};
use crate::inference::influence_into;
use crate::multiplier::{critical_value, multiplier_matrix, p_value, SupAccumulator};
use crate::rng::derive_u64;
use crate::solver::{walk_times, FitConfig, PointStatus, WeightMode};

/// The transient state the simulation experiments analyze.
pub const SIM_TARGET_STATE: u32 = 2;

#[derive(Debug, Error)]
pub enum McError {
    #[error("{0}")]
    BadSettings(String),
    #[error("all {0} replicates failed; first failure: {1}")]
    AllFailed(usize, String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSettings {
    pub alpha: f64,
    pub draws: usize,
    pub coefficients: Vec<usize>,
    /// Domain percentile bounds over observed response-jump times.
    pub domain_lo: f64,
    pub domain_hi: f64,
}

impl Default for BandSettings {
    fn default() -> Self {
        BandSettings {
            alpha: 0.05,
            draws: 1000,
            coefficients: vec![0, 1, 2],
            domain_lo: 0.10,
            domain_hi: 0.90,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSettings {
    /// Rejection level; a replicate rejects when p < alpha.
    pub alpha: f64,
    pub draws: usize,
    pub coefficients: Vec<usize>,
    pub domain_lo: f64,
    pub domain_hi: f64,
}

impl Default for TestSettings {
    fn default() -> Self {
        TestSettings {
            alpha: 0.05,
            draws: 1000,
            coefficients: vec![1, 2],
            domain_lo: 0.10,
            domain_hi: 0.90,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSettings {
    pub reps: usize,
    pub report_times: Vec<f64>,
    pub modes: Vec<WeightMode>,
    pub band: Option<BandSettings>,
    pub test: Option<TestSettings>,
    /// Worker threads; 0 means the rayon default. Excluded from
    /// serialization (and hence config hashes): it never affects results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings {
            reps: 1000,
            report_times: (1..=9).map(|i| i as f64 * 0.2).collect(),
            modes: vec![WeightMode::Tcm, WeightMode::Iid],
            band: None,
            test: None,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointwiseCell {
    pub mode: WeightMode,
    pub coefficient: usize,
    pub t: f64,
    pub truth: f64,
    pub bias: f64,
    pub ase: f64,
    pub mcsd: f64,
    pub cp: f64,
    /// Binomial Monte Carlo error of the coverage proportion.
    pub cp_mc_se: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandCell {
    pub mode: WeightMode,
    pub coefficient: usize,
    pub coverage: f64,
    pub mc_se: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestCell {
    pub mode: WeightMode,
    pub coefficient: usize,
    /// Marginal slope truth for slope coefficients (None for the intercept).
    pub effect: Option<f64>,
    pub rejection_rate: f64,
    pub mc_se: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MCReport {
    pub replications: usize,
    pub completed: usize,
    pub failed: usize,
    pub master_seed: u64,
    pub pointwise: Vec<PointwiseCell>,
    pub bands: Vec<BandCell>,
    pub tests: Vec<TestCell>,
}

/// Outcome of one replicate: estimate/SE pairs at report times and
/// band/test indicators, indexed `[mode][...]`.
#[allow(clippy::type_complexity)]
struct RepOutcome {
    /// `[mode][report time][coefficient]`.
    pointwise: Vec<Vec<Vec<Option<(f64, f64)>>>>,
    /// `[mode][position in band coefficients]`.
    band_covered: Vec<Vec<Option<bool>>>,
    /// `[mode][position in test coefficients]`.
    test_rejected: Vec<Vec<Option<bool>>>,
}

struct Channel {
    coef: usize,
    domain: (f64, f64),
    for_band: bool,
    for_test: bool,
    acc: SupAccumulator,
    /// (t, beta_l, q_l) for every usable domain grid point.
    path: Vec<(f64, f64, f64)>,
}

/// Run the full experiment defined by `(sim, fit, settings)`.
///
/// Each replicate derives its simulation seed and multiplier streams from
/// `sim.rng_seed` and its index. Failed replicates are excluded and counted.
pub fn run_replications(
    sim: &SimConfig,
    fit: &FitConfig,
    settings: &McSettings,
) -> Result<MCReport, McError> {
    if settings.reps == 0 {
        return Err(McError::BadSettings("reps must be at least 1".into()));
    }
    if settings.modes.is_empty() {
        return Err(McError::BadSettings("at least one weight mode".into()));
    }
    fit.validate().map_err(McError::BadSettings)?;
    sim.validate()
        .map_err(|e| McError::BadSettings(e.to_string()))?;
    if let Some(band) = &settings.band {
        if band.draws < 100 {
            return Err(McError::BadSettings("band draws must be >= 100".into()));
        }
    }
    if settings
        .report_times
        .iter()
        .any(|&t| !(t > 0.0 && t < sim.tau))
    {
        return Err(McError::BadSettings(format!(
            "report times must lie strictly inside (0, {})",
            sim.tau
        )));
    }
    let dim = 3usize; // intercept + the generator's two covariates
    for coefs in [
        settings.band.as_ref().map(|b| &b.coefficients),
        settings.test.as_ref().map(|t| &t.coefficients),
    ]
    .into_iter()
    .flatten()
    {
        if coefs.iter().any(|&c| c >= dim) {
            return Err(McError::BadSettings(format!(
                "coefficient indices must be < {dim}"
            )));
        }
    }

    let truth = SimTruth {
        phi: sim.phi_bridge,
        alpha: sim.alpha_stable,
        beta_slopes: [
            sim.phi_bridge * sim.beta_resp_cond[0],
            sim.phi_bridge * sim.beta_resp_cond[1],
        ],
        hazard_slopes: [
            sim.alpha_stable * sim.beta_surv_cond[0],
            sim.alpha_stable * sim.beta_surv_cond[1],
        ],
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| McError::BadSettings(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RepOutcome, String>> = pool.install(|| {
        (0..settings.reps)
            .into_par_iter()
            .map(|rep| run_one(sim, fit, settings, &truth, rep as u64))
            .collect()
    });

    aggregate(sim, settings, &truth, outcomes)
}

fn run_one(
    sim: &SimConfig,
    fit: &FitConfig,
    settings: &McSettings,
    truth: &SimTruth,
    rep: u64,
) -> Result<RepOutcome, String> {
    let mut cfg_rep = sim.clone();
    cfg_rep.rng_seed = derive_u64(sim.rng_seed, rep, 0x01);
    let (data, _) = simulate_study(&cfg_rep).map_err(|e| e.to_string())?;
    let h = SIM_TARGET_STATE;
    let grid = jump_grid(&data, h).map_err(|e| e.to_string())?;
    if grid.is_empty() {
        return Err("empty jump grid".into());
    }

    // Map each report time to the governing grid index (largest grid point
    // at or before it).
    let report_idx: Vec<Option<usize>> = settings
        .report_times
        .iter()
        .map(|&t| {
            let idx = grid.partition_point(|&g| g <= t);
            idx.checked_sub(1)
        })
        .collect();

    let band_domain = match &settings.band {
        Some(b) => Some(
            response_jump_percentiles(&data, h, b.domain_lo, b.domain_hi)
                .map_err(|e| e.to_string())?,
        ),
        None => None,
    };
    let test_domain = match &settings.test {
        Some(t) => Some(
            response_jump_percentiles(&data, h, t.domain_lo, t.domain_hi)
                .map_err(|e| e.to_string())?,
        ),
        None => None,
    };

    // Solve only the grid points something consumes: every point inside a
    // band/test domain plus the points governing the report times.
    let full_path = settings.band.is_some() || settings.test.is_some();
    let mut times: Vec<f64> = Vec::new();
    if full_path {
        let lo = [band_domain, test_domain]
            .iter()
            .flatten()
            .map(|d| d.0)
            .fold(f64::INFINITY, f64::min);
        let hi = [band_domain, test_domain]
            .iter()
            .flatten()
            .map(|d| d.1)
            .fold(f64::NEG_INFINITY, f64::max);
        times.extend(grid.iter().copied().filter(|&t| t >= lo && t <= hi));
    }
    times.extend(report_idx.iter().flatten().map(|&idx| grid[idx]));
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();

    let dim = data.n_covariates() + 1;
    let n_times = settings.report_times.len();
    let mut outcome = RepOutcome {
        pointwise: vec![vec![vec![None; dim]; n_times]; settings.modes.len()],
        band_covered: vec![
            vec![
                None;
                settings
                    .band
                    .as_ref()
                    .map(|b| b.coefficients.len())
                    .unwrap_or(0)
            ];
            settings.modes.len()
        ],
        test_rejected: vec![
            vec![
                None;
                settings
                    .test
                    .as_ref()
                    .map(|t| t.coefficients.len())
                    .unwrap_or(0)
            ];
            settings.modes.len()
        ],
    };

    for (mode_pos, &mode) in settings.modes.iter().enumerate() {
        let cfg = FitConfig {
            weight_mode: mode,
            ..fit.clone()
        };
        let n_units = match mode {
            WeightMode::Tcm | WeightMode::Acm => data.n_clusters(),
            WeightMode::Iid => data.n_subjects(),
        };

        // One multiplier matrix per (replicate, mode), shared by every
        // coefficient channel so bands and tests see the same draws.
        let mut channels: Vec<Channel> = Vec::new();
        let draws = settings
            .band
            .as_ref()
            .map(|b| b.draws)
            .or(settings.test.as_ref().map(|t| t.draws))
            .unwrap_or(0);
        if full_path && draws > 0 {
            let xi_seed = derive_u64(sim.rng_seed, rep, 0x100 + mode_pos as u64);
            let xi = multiplier_matrix(n_units, draws, xi_seed);
            if let (Some(band), Some(domain)) = (&settings.band, band_domain) {
                for &coef in &band.coefficients {
                    channels.push(Channel {
                        coef,
                        domain,
                        for_band: true,
                        for_test: false,
                        acc: SupAccumulator::from_shared(xi.clone(), n_units, false),
                        path: Vec::new(),
                    });
                }
            }
            if let (Some(test), Some(domain)) = (&settings.test, test_domain) {
                for &coef in &test.coefficients {
                    if let Some(existing) = channels
                        .iter_mut()
                        .find(|c| c.coef == coef && c.domain == domain)
                    {
                        existing.for_test = true;
                    } else {
                        channels.push(Channel {
                            coef,
                            domain,
                            for_band: false,
                            for_test: true,
                            acc: SupAccumulator::from_shared(xi.clone(), n_units, false),
                            path: Vec::new(),
                        });
                    }
                }
            }
        }

        let needs_phi_everywhere = !channels.is_empty();
        let sqrt_n = (n_units as f64).sqrt();
        let inv_sqrt_n = 1.0 / sqrt_n;
        let mut scaled = vec![0.0; n_units];
        let mut scores_buf: Vec<f64> = Vec::new();
        let mut phi: Vec<f64> = Vec::new();

        let walk = walk_times(&data, h, &cfg, &times, |idx, slice, solve, view| {
            if solve.fit.status != PointStatus::Converged {
                return;
            }
            let t = times[idx];
            let at_report = report_idx
                .iter()
                .any(|ri| ri.map(|i| grid[i] == t).unwrap_or(false));
            let in_some_domain = channels
                .iter()
                .any(|c| t >= c.domain.0 && t <= c.domain.1);
            if !(at_report || (needs_phi_everywhere && in_some_domain)) {
                return;
            }
            let info = match &solve.info {
                Some(j) => j / view.ctx.n_units as f64,
                None => return,
            };
            if influence_into(
                slice,
                &solve.fit.beta,
                &info,
                &cfg,
                &view,
                &mut scores_buf,
                &mut phi,
            )
            .is_err()
            {
                return;
            }
            if at_report {
                // standard errors for every coefficient at this point
                let n = n_units as f64;
                for (pos, ri) in report_idx.iter().enumerate() {
                    if ri.map(|i| grid[i] == t).unwrap_or(false) {
                        for l in 0..dim {
                            let mut acc = 0.0;
                            for i in 0..n_units {
                                let v = phi[i * dim + l];
                                acc += v * v;
                            }
                            let se = (acc / n / n).sqrt();
                            outcome.pointwise[mode_pos][pos][l] =
                                Some((solve.fit.beta[l], se));
                        }
                    }
                }
            }
            for channel in channels.iter_mut() {
                if t < channel.domain.0 || t > channel.domain.1 {
                    continue;
                }
                let l = channel.coef;
                let mut acc = 0.0;
                for i in 0..n_units {
                    let v = phi[i * dim + l];
                    acc += v * v;
                }
                let mean_sq = acc / n_units as f64;
                if mean_sq <= 0.0 {
                    continue; // degenerate point, excluded
                }
                let q = 1.0 / mean_sq.sqrt();
                let c = q * inv_sqrt_n;
                for i in 0..n_units {
                    scaled[i] = c * phi[i * dim + l];
                }
                channel.acc.push(&scaled);
                channel.path.push((t, solve.fit.beta[l], q));
            }
        });
        walk.map_err(|e| e.to_string())?;

        // Resolve channels into coverage and rejection indicators.
        for channel in channels {
            let Channel {
                coef,
                for_band,
                for_test,
                acc,
                path,
                ..
            } = channel;
            if path.is_empty() {
                continue;
            }
            let sups = acc.finish();
            if for_band {
                let band = settings.band.as_ref().expect("band channel");
                let c_alpha = critical_value(&sups, band.alpha);
                let covered = path.iter().all(|&(t, beta, q)| {
                    let half = c_alpha / (sqrt_n * q);
                    (beta - truth.coefficient_at(coef, t)).abs() <= half
                });
                if let Some(pos) = band.coefficients.iter().position(|&c| c == coef) {
                    outcome.band_covered[mode_pos][pos] = Some(covered);
                }
            }
            if for_test {
                let test = settings.test.as_ref().expect("test channel");
                let k_stat = path
                    .iter()
                    .fold(0.0f64, |m, &(_, beta, q)| m.max((sqrt_n * q * beta).abs()));
                let p = p_value(&sups, k_stat);
                if let Some(pos) = test.coefficients.iter().position(|&c| c == coef) {
                    outcome.test_rejected[mode_pos][pos] = Some(p < test.alpha);
                }
            }
        }
    }

    Ok(outcome)
}

#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum
    }
}

fn aggregate(
    sim: &SimConfig,
    settings: &McSettings,
    truth: &SimTruth,
    outcomes: Vec<Result<RepOutcome, String>>,
) -> Result<MCReport, McError> {
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    let completed = outcomes.len() - failed;
    if completed == 0 {
        let first = outcomes
            .into_iter()
            .find_map(|o| o.err())
            .unwrap_or_default();
        return Err(McError::AllFailed(settings.reps, first));
    }
    let ok: Vec<&RepOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let dim = ok[0].pointwise[0]
        .first()
        .map(|c| c.len())
        .unwrap_or(0);

    let mut pointwise = Vec::new();
    for (mode_pos, &mode) in settings.modes.iter().enumerate() {
        for (tp, &t) in settings.report_times.iter().enumerate() {
            for l in 0..dim {
                let tv = truth.coefficient_at(l, t);
                let mut beta_sum = Kahan::default();
                let mut se_sum = Kahan::default();
                let mut covered = 0usize;
                let mut n_used = 0usize;
                for rep in &ok {
                    if let Some((beta, se)) = rep.pointwise[mode_pos][tp][l] {
                        beta_sum.add(beta);
                        se_sum.add(se);
                        if (beta - tv).abs() <= 1.96 * se {
                            covered += 1;
                        }
                        n_used += 1;
                    }
                }
                if n_used == 0 {
                    continue;
                }
                let n = n_used as f64;
                let mean_beta = beta_sum.value() / n;
                let mut var_sum = Kahan::default();
                for rep in &ok {
                    if let Some((beta, _)) = rep.pointwise[mode_pos][tp][l] {
                        var_sum.add((beta - mean_beta) * (beta - mean_beta));
                    }
                }
                let mcsd = if n_used > 1 {
                    (var_sum.value() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                let cp = covered as f64 / n;
                pointwise.push(PointwiseCell {
                    mode,
                    coefficient: l,
                    t,
                    truth: tv,
                    bias: mean_beta - tv,
                    ase: se_sum.value() / n,
                    mcsd,
                    cp,
                    cp_mc_se: (cp * (1.0 - cp) / n).sqrt(),
                    n_used,
                });
            }
        }
    }

    let mut bands = Vec::new();
    if let Some(band) = &settings.band {
        for (mode_pos, &mode) in settings.modes.iter().enumerate() {
            for (pos, &coef) in band.coefficients.iter().enumerate() {
                let mut covered = 0usize;
                let mut n_used = 0usize;
                for rep in &ok {
                    if let Some(c) = rep.band_covered[mode_pos][pos] {
                        covered += usize::from(c);
                        n_used += 1;
                    }
                }
                if n_used == 0 {
                    continue;
                }
                let coverage = covered as f64 / n_used as f64;
                bands.push(BandCell {
                    mode,
                    coefficient: coef,
                    coverage,
                    mc_se: (coverage * (1.0 - coverage) / n_used as f64).sqrt(),
                    n_used,
                });
            }
        }
    }

    let mut tests = Vec::new();
    if let Some(test) = &settings.test {
        for (mode_pos, &mode) in settings.modes.iter().enumerate() {
            for (pos, &coef) in test.coefficients.iter().enumerate() {
                let mut rejected = 0usize;
                let mut n_used = 0usize;
                for rep in &ok {
                    if let Some(r) = rep.test_rejected[mode_pos][pos] {
                        rejected += usize::from(r);
                        n_used += 1;
                    }
                }
                if n_used == 0 {
                    continue;
                }
                let rate = rejected as f64 / n_used as f64;
                tests.push(TestCell {
                    mode,
                    coefficient: coef,
                    effect: match coef {
                        1 => Some(truth.beta_slopes[0]),
                        2 => Some(truth.beta_slopes[1]),
                        _ => None,
                    },
                    rejection_rate: rate,
                    mc_se: (rate * (1.0 - rate) / n_used as f64).sqrt(),
                    n_used,
                });
            }
        }
    }

    Ok(MCReport {
        replications: settings.reps,
        completed,
        failed,
        master_seed: sim.rng_seed,
        pointwise,
        bands,
        tests,
    })
}

/// Paper-table presets for the `replicate` command and the acceptance suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Pointwise bias/ASE/MCSD/CP at the nine report times, tcm and iid.
    Table1,
    /// Simultaneous band coverage with B = 1000.
    Table2,
    /// KS-test size and power across marginal effect sizes.
    Table3,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Ok(Preset::Table1),
            "table2" => Ok(Preset::Table2),
            "table3" => Ok(Preset::Table3),
            other => Err(format!(
                "unknown preset `{other}` (expected table1|table2|table3)"
            )),
        }
    }
}

/// A fully resolved experiment: one `run_replications` call per effect size.
#[derive(Debug, Clone)]
pub struct PresetPlan {
    pub sim: SimConfig,
    pub fit: FitConfig,
    pub settings: McSettings,
    /// Marginal slope values applied to both covariates; one run per entry.
    pub effects: Vec<f64>,
}

impl PresetPlan {
    pub fn new(preset: Preset, n_clusters: usize, seed: u64) -> Self {
        let sim = SimConfig::new(n_clusters, seed);
        let fit = FitConfig::default();
        let default_marginal = sim.phi_bridge * sim.beta_resp_cond[0];
        match preset {
            Preset::Table1 => PresetPlan {
                sim,
                fit,
                settings: McSettings::default(),
                effects: vec![default_marginal],
            },
            Preset::Table2 => PresetPlan {
                sim,
                fit,
                settings: McSettings {
                    band: Some(BandSettings::default()),
                    ..McSettings::default()
                },
                effects: vec![default_marginal],
            },
            Preset::Table3 => PresetPlan {
                sim,
                fit,
                settings: McSettings {
                    test: Some(TestSettings::default()),
                    modes: vec![WeightMode::Tcm, WeightMode::Iid],
                    ..McSettings::default()
                },
                effects: vec![0.0, -0.05, -0.1, -0.25],
            },
        }
    }

    /// Run every effect-size scenario; conditional slopes are
    /// `effect / phi` for both covariates.
    pub fn run(&self) -> Result<Vec<(f64, MCReport)>, McError> {
        let mut out = Vec::with_capacity(self.effects.len());
        for (k, &effect) in self.effects.iter().enumerate() {
            let mut sim = self.sim.clone();
            let conditional = effect / sim.phi_bridge;
            sim.beta_resp_cond = [conditional, conditional];
            // keep scenario streams distinct but derived from the one master
            sim.rng_seed = derive_u64(self.sim.rng_seed, 0xeff, k as u64);
            let report = run_replications(&sim, &self.fit, &self.settings)?;
            out.push((effect, report));
        }
        Ok(out)
    }
}
