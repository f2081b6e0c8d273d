//! Acceptance suite: desk-scale reproduction of the simulation experiments
//! plus exact estimator identities and determinism contracts.
//!
//! Each criterion prints one pass/fail line (visible with `--nocapture`,
//! and mirrored by the per-test result lines).

use std::sync::OnceLock;

use tsoreg::data::{slice_at, Cluster, Slice, StudyData};
use tsoreg::dgp::{
    bridge_cdf, censoring_fraction, sample_bridge, sample_positive_stable, simulate_study,
    SimConfig,
};
use tsoreg::inference::{fit_with_influence, info_matrix};
use tsoreg::montecarlo::{run_replications, BandSettings, MCReport, McSettings, TestSettings};
use tsoreg::multiplier::ks_test;
use tsoreg::rng::substream;
use tsoreg::solver::{
    estimating_function, fit_at_times, solve_at_time, FitConfig, WeightMode,
};

const MASTER_SEED: u64 = 20260811;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance] {criterion}: {status} | {detail}");
    assert!(pass, "{criterion} failed: {detail}");
}

fn pointwise_cell<'a>(
    report: &'a MCReport,
    mode: WeightMode,
    coef: usize,
    t: f64,
) -> &'a tsoreg::montecarlo::PointwiseCell {
    report
        .pointwise
        .iter()
        .find(|c| c.mode == mode && c.coefficient == coef && (c.t - t).abs() < 1e-9)
        .unwrap_or_else(|| panic!("missing cell {mode} coef={coef} t={t}"))
}

// ---------------------------------------------------------------------------
// Criteria 1-2: pointwise reproduction and the independence-comparator
// undercoverage (shared Monte Carlo runs).
// ---------------------------------------------------------------------------

static TABLE1: OnceLock<(MCReport, MCReport)> = OnceLock::new();

fn table1_reports() -> &'static (MCReport, MCReport) {
    TABLE1.get_or_init(|| {
        let fit = FitConfig::default();
        let settings = McSettings {
            reps: 300,
            threads: 0,
            ..McSettings::default()
        };
        let run = |n: usize| {
            let sim = SimConfig::new(n, MASTER_SEED);
            run_replications(&sim, &fit, &settings).expect("table1 run")
        };
        (run(50), run(200))
    })
}

#[test]
fn criterion_1_pointwise_accuracy_matches_reported_cells() {
    let (n50, n200) = table1_reports();
    // reported 95% CI coverage for the slope of the first covariate
    let reference = [
        (n50, 50usize, [(0.2, 0.924), (1.0, 0.924), (1.8, 0.915)]),
        (n200, 200usize, [(0.2, 0.952), (1.0, 0.947), (1.8, 0.941)]),
    ];
    let mut detail = String::new();
    let mut pass = true;
    for (report, n, cells) in reference {
        for (t, cp_ref) in cells {
            let cell = pointwise_cell(report, WeightMode::Tcm, 1, t);
            let bias_ok = cell.bias.abs() <= 0.015;
            let ratio = (cell.ase - cell.mcsd).abs() / cell.mcsd;
            let ratio_ok = ratio <= 0.15;
            let cp_ok = (cell.cp - cp_ref).abs() <= 0.035;
            pass &= bias_ok && ratio_ok && cp_ok;
            detail.push_str(&format!(
                "[n={n} t={t}: bias={:+.4} ase={:.4} mcsd={:.4} cp={:.3} (ref {cp_ref})] ",
                cell.bias, cell.ase, cell.mcsd, cell.cp
            ));
        }
    }
    verdict("criterion 1 (pointwise table, 300 reps)", pass, &detail);
}

#[test]
fn criterion_2_independence_comparator_undercovers() {
    let (n50, n200) = table1_reports();
    let c50 = pointwise_cell(n50, WeightMode::Iid, 1, 1.0);
    let c200 = pointwise_cell(n200, WeightMode::Iid, 1, 1.0);
    let pass = c50.cp < 0.90 && c200.cp < 0.90;
    verdict(
        "criterion 2 (iid undercoverage at t=1.0)",
        pass,
        &format!("cp(n=50)={:.3}, cp(n=200)={:.3}, both < 0.90", c50.cp, c200.cp),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: simultaneous band coverage.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_band_coverage() {
    let sim = SimConfig::new(100, MASTER_SEED);
    let fit = FitConfig::default();
    let settings = McSettings {
        reps: 300,
        modes: vec![WeightMode::Tcm, WeightMode::Iid],
        band: Some(BandSettings {
            coefficients: vec![1],
            ..BandSettings::default()
        }),
        threads: 0,
        ..McSettings::default()
    };
    let report = run_replications(&sim, &fit, &settings).expect("table2 run");
    let tcm = report
        .bands
        .iter()
        .find(|b| b.mode == WeightMode::Tcm && b.coefficient == 1)
        .unwrap();
    let iid = report
        .bands
        .iter()
        .find(|b| b.mode == WeightMode::Iid && b.coefficient == 1)
        .unwrap();
    let pass = (0.89..=0.965).contains(&tcm.coverage) && iid.coverage <= 0.87;
    verdict(
        "criterion 3 (band coverage, n=100, B=1000, 300 reps)",
        pass,
        &format!(
            "tcm={:.3} in [0.89, 0.965], iid={:.3} <= 0.87",
            tcm.coverage, iid.coverage
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: covariate-test size and power.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_test_size_and_power() {
    let fit = FitConfig::default();
    let settings = McSettings {
        reps: 500,
        modes: vec![WeightMode::Tcm],
        test: Some(TestSettings {
            coefficients: vec![1],
            ..TestSettings::default()
        }),
        threads: 0,
        ..McSettings::default()
    };
    let run = |marginal_effect: f64| {
        let mut sim = SimConfig::new(200, MASTER_SEED);
        let conditional = marginal_effect / sim.phi_bridge;
        sim.beta_resp_cond = [conditional, conditional];
        let report = run_replications(&sim, &fit, &settings).expect("table3 run");
        report
            .tests
            .iter()
            .find(|c| c.mode == WeightMode::Tcm && c.coefficient == 1)
            .unwrap()
            .rejection_rate
    };
    let size = run(0.0);
    let power = run(-0.1);
    let pass = (0.025..=0.085).contains(&size) && power >= 0.95;
    verdict(
        "criterion 4 (test size and power, n=200, 500 reps)",
        pass,
        &format!("type-I={size:.3} in [0.025, 0.085], power(-0.1)={power:.3} >= 0.95"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: censoring-rate calibration of the default generator.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_censoring_rate_calibration() {
    let reps = 200u64;
    let mut acc = 0.0;
    for rep in 0..reps {
        let mut cfg = SimConfig::new(200, 0);
        cfg.rng_seed = tsoreg::rng::derive_u64(MASTER_SEED, rep, 0x05);
        let (data, _) = simulate_study(&cfg).unwrap();
        acc += censoring_fraction(&data);
    }
    let mean = acc / reps as f64;
    let pass = (mean - 0.277).abs() <= 0.010;
    verdict(
        "criterion 5 (censoring rate, 200 reps)",
        pass,
        &format!("mean={mean:.4}, target 0.277 +- 0.010"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: sampler oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_sampler_oracles() {
    let n = 1_000_000usize;

    // positive stable: Laplace transform identity E e^{-s gamma} = e^{-s^a}
    let mut rng = substream(MASTER_SEED, 0x60);
    let mut lap1 = 0.0;
    let mut lap4 = 0.0;
    for _ in 0..n {
        let g = sample_positive_stable(0.5, &mut rng);
        lap1 += (-g).exp();
        lap4 += (-4.0 * g).exp();
    }
    lap1 /= n as f64;
    lap4 /= n as f64;
    let stable_ok = (lap1 - (-1.0f64).exp()).abs() < 0.002 && (lap4 - (-2.0f64).exp()).abs() < 0.002;

    // bridge: KS distance of draws against the closed-form distribution
    let phi = 0.5;
    let mut rng = substream(MASTER_SEED, 0x61);
    let mut draws: Vec<f64> = (0..n).map(|_| sample_bridge(phi, &mut rng)).collect();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ks = 0.0f64;
    for (i, &b) in draws.iter().enumerate() {
        let f = bridge_cdf(phi, b);
        let hi = (i + 1) as f64 / n as f64;
        let lo = i as f64 / n as f64;
        ks = ks.max((f - lo).abs()).max((hi - f).abs());
    }
    let ks_ok = ks < 0.002;

    // bridge marginalization: E expit(b + eta) = expit(phi * eta)
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut marg_ok = true;
    let mut marg_detail = String::new();
    for eta in [-1.0, 0.0, 1.0] {
        let mc: f64 = draws.iter().map(|&b| expit(b + eta)).sum::<f64>() / n as f64;
        let target = expit(phi * eta);
        marg_ok &= (mc - target).abs() < 0.002;
        marg_detail.push_str(&format!("eta={eta}: {mc:.4} vs {target:.4}; "));
    }

    let pass = stable_ok && ks_ok && marg_ok;
    verdict(
        "criterion 6 (sampler oracles, 1e6 draws)",
        pass,
        &format!(
            "laplace s=1: {lap1:.4} (e^-1={:.4}), s=4: {lap4:.4} (e^-2={:.4}); bridge KS={ks:.5}; {marg_detail}",
            (-1.0f64).exp(),
            (-2.0f64).exp()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: solver oracle equivalence on small random instances.
// ---------------------------------------------------------------------------

/// Weighted Bernoulli quasi-log-likelihood; the only shared code with the
/// solver path is the standard library exp/ln.
fn quasi_loglik(slice: &Slice, beta: &[f64]) -> f64 {
    let dim = slice.dim();
    let mut ll = 0.0;
    for row in 0..slice.n_rows() {
        if slice.s[row] & slice.r[row] == 0 {
            continue;
        }
        let w = 1.0 / slice.cluster_sizes[slice.cluster_of_row[row] as usize] as f64;
        let x = slice.row_x(row);
        let mut eta = 0.0;
        for k in 0..dim {
            eta += beta[k] * x[k];
        }
        // log mu and log(1-mu) via the numerically stable softplus form
        let log_mu = -(1.0 + (-eta).exp()).ln().max(-700.0);
        let log_one_minus = -(1.0 + eta.exp()).ln().max(-700.0);
        ll += w * if slice.y[row] == 1 { log_mu } else { log_one_minus };
    }
    ll
}

/// Golden-section maximization of a 1-d restriction.
fn golden_max(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let inv_phi = 0.618_033_988_749_894_9_f64;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Brute-force maximizer: for one coefficient, plain golden-section; beyond
/// that, a coarse grid argmax polished by Powell's direction-set method with
/// golden line searches. Uses only likelihood evaluations.
fn oracle_fit(slice: &Slice, dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![golden_max(|v| quasi_loglik(slice, &[v]), -30.0, 30.0, 140)];
    }

    // coarse grid over [-6, 6]^dim
    let steps = if dim == 2 { 41usize } else { 17 };
    let mut best = vec![0.0; dim];
    let mut best_ll = f64::NEG_INFINITY;
    let mut point = vec![0.0; dim];
    let mut counter = vec![0usize; dim];
    loop {
        for k in 0..dim {
            point[k] = -6.0 + 12.0 * counter[k] as f64 / (steps - 1) as f64;
        }
        let ll = quasi_loglik(slice, &point);
        if ll > best_ll {
            best_ll = ll;
            best.copy_from_slice(&point);
        }
        let mut k = 0;
        loop {
            counter[k] += 1;
            if counter[k] < steps {
                break;
            }
            counter[k] = 0;
            k += 1;
            if k == dim {
                return powell_polish(slice, best);
            }
        }
    }
}

/// Powell's method: line-maximize along a direction set, replacing the
/// direction of largest gain with the overall displacement each round.
fn powell_polish(slice: &Slice, mut x: Vec<f64>) -> Vec<f64> {
    let dim = x.len();
    let mut dirs: Vec<Vec<f64>> = (0..dim)
        .map(|k| (0..dim).map(|j| f64::from(u8::from(j == k))).collect())
        .collect();
    let mut fx = quasi_loglik(slice, &x);
    for _ in 0..120 {
        let x_start = x.clone();
        let mut biggest_gain = 0.0;
        let mut biggest_idx = 0;
        for (idx, dir) in dirs.iter().enumerate() {
            let before = fx;
            let base = x.clone();
            let t = golden_max(
                |t| {
                    let candidate: Vec<f64> =
                        base.iter().zip(dir).map(|(xi, di)| xi + t * di).collect();
                    quasi_loglik(slice, &candidate)
                },
                -4.0,
                4.0,
                120,
            );
            for k in 0..dim {
                x[k] += t * dirs[idx][k];
            }
            fx = quasi_loglik(slice, &x);
            if fx - before > biggest_gain {
                biggest_gain = fx - before;
                biggest_idx = idx;
            }
        }
        let disp: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let disp_norm = disp.iter().map(|v| v * v).sum::<f64>().sqrt();
        if disp_norm < 1e-11 {
            break;
        }
        // one extra search along the displacement, then adopt it
        let base = x.clone();
        let t = golden_max(
            |t| {
                let candidate: Vec<f64> =
                    base.iter().zip(&disp).map(|(xi, di)| xi + t * di).collect();
                quasi_loglik(slice, &candidate)
            },
            -2.0,
            2.0,
            120,
        );
        for k in 0..dim {
            x[k] += t * disp[k];
        }
        fx = quasi_loglik(slice, &x);
        dirs[biggest_idx] = disp;
    }
    x
}

fn random_instance(seed: u64) -> Option<Slice> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = substream(MASTER_SEED, 0x7000 + seed);
    let dim = rng.random_range(1..=3usize);
    let n_rows = rng.random_range(6..=20usize);
    let n_clusters = rng.random_range(2..=4usize).min(n_rows);
    let truth: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut slice = Slice {
        t: 0.5,
        n_covariates: dim - 1,
        cluster_of_row: Vec::new(),
        cluster_sizes: vec![0; n_clusters],
        y: Vec::new(),
        s: Vec::new(),
        r: Vec::new(),
        x: Vec::new(),
    };
    for row in 0..n_rows {
        let cluster = row % n_clusters;
        slice.cluster_of_row.push(cluster as u32);
        slice.cluster_sizes[cluster] += 1;
        let mut eta = 0.0;
        slice.x.push(1.0);
        eta += truth[0];
        for k in 1..dim {
            let x: f64 = StandardNormal.sample(&mut rng);
            slice.x.push(x);
            eta += truth[k] * x;
        }
        let mu = 1.0 / (1.0 + (-eta).exp());
        slice.y.push(u8::from(rng.random::<f64>() < mu));
        // a sprinkle of excluded rows exercises the s*r filter
        let active = rng.random::<f64>() < 0.9;
        slice.s.push(u8::from(active));
        slice.r.push(1);
    }
    let active_y: Vec<u8> = (0..n_rows)
        .filter(|&i| slice.s[i] & slice.r[i] == 1)
        .map(|i| slice.y[i])
        .collect();
    if active_y.iter().all(|&v| v == 1) || active_y.iter().all(|&v| v == 0) {
        return None;
    }
    Some(slice)
}

#[test]
fn criterion_7_solver_oracle_equivalence() {
    let cfg = FitConfig {
        tol: 1e-12,
        ..FitConfig::default()
    };
    let mut checked = 0usize;
    let mut seed = 0u64;
    let mut max_beta_err = 0.0f64;
    let mut max_h_err = 0.0f64;
    while checked < 100 {
        seed += 1;
        assert!(seed < 4000, "instance generation exhausted");
        let Some(slice) = random_instance(seed) else {
            continue;
        };
        let Ok(fit) = solve_at_time(&slice, &cfg, None) else {
            continue; // separated or singular draw
        };
        if !fit.is_estimable() {
            continue;
        }
        let dim = slice.dim();

        // averaged information against the finite-difference score Jacobian
        let h = info_matrix(&slice, &fit.beta, &cfg).unwrap();
        // a pure function-value oracle cannot resolve 1e-6 along nearly flat
        // likelihood directions, so screen out badly conditioned draws
        if dim > 1 {
            let eig = h.clone().symmetric_eigenvalues();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for &v in eig.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo <= 0.0 || hi / lo > 300.0 {
                continue;
            }
        }
        let oracle = oracle_fit(&slice, dim);
        if oracle.iter().any(|b| b.abs() > 6.0) {
            continue; // near-separated, oracle box unreliable
        }
        for k in 0..dim {
            max_beta_err = max_beta_err.max((fit.beta[k] - oracle[k]).abs());
        }

        let n_units = slice.n_clusters() as f64;
        let eps = 1e-5;
        let mut h_scale = 0.0f64;
        for a in 0..dim {
            for b in 0..dim {
                h_scale = h_scale.max(h[(a, b)].abs());
            }
        }
        for b in 0..dim {
            let mut plus = fit.beta.clone();
            let mut minus = fit.beta.clone();
            plus[b] += eps;
            minus[b] -= eps;
            let up = estimating_function(&slice, &plus, &cfg).unwrap();
            let um = estimating_function(&slice, &minus, &cfg).unwrap();
            for a in 0..dim {
                let fd = -(up[a] - um[a]) / (2.0 * eps) / n_units;
                max_h_err = max_h_err.max((h[(a, b)] - fd).abs() / h_scale);
            }
        }
        checked += 1;
    }
    let pass = max_beta_err < 1e-6 && max_h_err < 1e-4;
    verdict(
        "criterion 7 (solver oracle, 100 instances)",
        pass,
        &format!("max |beta - oracle| = {max_beta_err:.2e} < 1e-6, max rel H error = {max_h_err:.2e} < 1e-4"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: algebraic identities on a simulated study.
// ---------------------------------------------------------------------------

fn slice_weight_total(slice: &Slice, mode: WeightMode) -> f64 {
    (0..slice.n_rows())
        .filter(|&row| slice.s[row] & slice.r[row] == 1)
        .map(|row| match mode {
            WeightMode::Tcm => {
                1.0 / slice.cluster_sizes[slice.cluster_of_row[row] as usize] as f64
            }
            _ => 1.0,
        })
        .sum()
}

#[test]
fn criterion_8_algebraic_identities() {
    let cfg = FitConfig::default();
    let (data, _) = simulate_study(&SimConfig::new(40, MASTER_SEED ^ 0x8)).unwrap();
    let (fit, infl) = fit_with_influence(&data, 2, &cfg).unwrap();
    let n = infl.n_units as f64;

    let mut score_ok = true;
    let mut influence_sum_ok = true;
    let mut q_identity_ok = true;
    let mut max_score = 0.0f64;
    for (k, point) in fit.points.iter().enumerate() {
        if !point.is_estimable() || !infl.is_estimable(k) {
            continue;
        }
        let slice = slice_at(&data, 2, point.t).unwrap();
        let u = estimating_function(&slice, &point.beta, &cfg).unwrap();
        let scale = slice_weight_total(&slice, cfg.weight_mode).max(1.0);
        let score = u.iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        max_score = max_score.max(score);
        score_ok &= score < 1e-6;

        let phi = infl.phi[k].as_ref().unwrap();
        for l in 0..infl.dim {
            let total: f64 = (0..infl.n_units).map(|i| phi[i * infl.dim + l]).sum();
            influence_sum_ok &= total.abs() < 1e-6 * n;
        }

        let se = infl.se_at(k).unwrap();
        for l in 0..infl.dim {
            if let Some(q) = infl.q_weight_at(k, l) {
                q_identity_ok &= (q * n.sqrt() * se[l] - 1.0).abs() < 1e-12;
            }
        }
    }

    // tcm and acm coincide when every cluster has the same size
    let trimmed: Vec<Cluster> = data
        .clusters()
        .iter()
        .map(|c| Cluster {
            cluster_id: c.cluster_id.clone(),
            members: c.members.iter().take(20).cloned().collect(),
        })
        .collect();
    let equal = StudyData::new(
        trimmed,
        data.tau(),
        data.state_space().clone(),
        data.absorbing().clone(),
    )
    .unwrap();
    let ts = [0.5, 1.0, 1.5];
    let tcm_fit = fit_at_times(&equal, 2, &ts, &cfg).unwrap();
    let acm_fit = fit_at_times(
        &equal,
        2,
        &ts,
        &FitConfig {
            weight_mode: WeightMode::Acm,
            ..cfg.clone()
        },
    )
    .unwrap();
    let mut collapse_ok = true;
    for (a, b) in tcm_fit.points.iter().zip(&acm_fit.points) {
        if a.is_estimable() && b.is_estimable() {
            for (x, y) in a.beta.iter().zip(&b.beta) {
                collapse_ok &= (x - y).abs() < 1e-8;
            }
        }
    }

    // a zero coefficient path forces K = 0 and p = 1
    let mut zeroed = fit.clone();
    for point in &mut zeroed.points {
        if !point.beta.is_empty() {
            point.beta[1] = 0.0;
        }
    }
    let domain = tsoreg::data::response_jump_percentiles(&data, 2, 0.10, 0.90).unwrap();
    let test = ks_test(&zeroed, &infl, 1, 400, domain, 3, false).unwrap();
    let ks_ok = test.k_stat == 0.0 && test.p_value == 1.0;

    let pass = score_ok && influence_sum_ok && q_identity_ok && collapse_ok && ks_ok;
    verdict(
        "criterion 8 (algebraic identities)",
        pass,
        &format!(
            "max scaled score={max_score:.2e}; influence sums zero: {influence_sum_ok}; q*sqrt(n)*se=1: {q_identity_ok}; tcm==acm: {collapse_ok}; K=0 => p=1: {ks_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: outputs are byte-identical across worker counts.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_thread_count_determinism() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_tsoreg");
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("spawn tsoreg");
        assert!(
            out.status.success(),
            "command failed: {:?}\n{}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };

    let data_csv = base.join("study.csv");
    run(&[
        "simulate",
        "--n",
        "20",
        "--seed",
        "5",
        "--out",
        data_csv.to_str().unwrap(),
    ]);

    let mut all_ok = true;
    let mut detail = String::new();
    for threads in ["1", "4", "8"] {
        let band = base.join(format!("band{threads}.csv"));
        run(&[
            "band",
            "--input",
            data_csv.to_str().unwrap(),
            "--tau",
            "2",
            "--out",
            band.to_str().unwrap(),
            "--coef",
            "1",
            "--boot",
            "300",
            "--seed",
            "11",
            "--threads",
            threads,
        ]);
        let test = base.join(format!("test{threads}.json"));
        run(&[
            "test",
            "--input",
            data_csv.to_str().unwrap(),
            "--tau",
            "2",
            "--out",
            test.to_str().unwrap(),
            "--boot",
            "300",
            "--seed",
            "11",
            "--threads",
            threads,
        ]);
        let rep = base.join(format!("rep{threads}"));
        run(&[
            "replicate",
            "--preset",
            "table2",
            "--out-dir",
            rep.to_str().unwrap(),
            "--reps",
            "4",
            "--n",
            "15",
            "--boot",
            "150",
            "--coefs",
            "1",
            "--seed",
            "13",
            "--threads",
            threads,
        ]);
    }
    for (kind, name) in [
        ("band", "band{T}.csv"),
        ("test", "test{T}.json"),
        ("replicate pointwise", "rep{T}/pointwise.csv"),
        ("replicate bands", "rep{T}/bands.csv"),
        ("replicate json", "rep{T}/report.json"),
    ] {
        let read = |threads: &str| std::fs::read(base.join(name.replace("{T}", threads))).unwrap();
        let one = read("1");
        let same = one == read("4") && one == read("8");
        all_ok &= same;
        detail.push_str(&format!("{kind}: {} ", if same { "identical" } else { "DIFFERS" }));
    }
    verdict(
        "criterion 9 (determinism across 1/4/8 threads)",
        all_ok,
        &detail,
    );
}
