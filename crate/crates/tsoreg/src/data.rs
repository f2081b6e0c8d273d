//! Clustered multistate panel data: step functions, subject records, clusters,
//! indicator slices, and the jump-time grid.
//!
//! All types are immutable after construction and safe to share across worker
//! threads. Subjects and clusters are kept in canonical `(cluster_id,
//! subject_id)` order so that row ordering, fingerprints, and downstream
//! estimates are invariant to input permutations.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// State label. States form a finite set `1..=k`; a subset is absorbing.
pub type State = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("step function breakpoints must be finite and strictly increasing")]
    InvalidBreakpoints,
    #[error("step function needs exactly one more value than breakpoints (got {values} values, {breakpoints} breakpoints)")]
    ValueCountMismatch { values: usize, breakpoints: usize },
    #[error("cluster `{0}` has no members")]
    EmptyCluster(String),
    #[error("subject `{subject}`: state {state} is not in the declared state space")]
    UnknownState { subject: String, state: State },
    #[error("subject `{subject}`: leaves absorbing state {state} at t={time}")]
    AbsorbingViolation {
        subject: String,
        state: State,
        time: f64,
    },
    #[error("subject `{subject}`: time {time} outside [0, {tau}]")]
    TimeOutOfRange {
        subject: String,
        time: f64,
        tau: f64,
    },
    #[error("subject `{subject}`: expected {expected} covariates, found {found}")]
    CovariateCountMismatch {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("state {0} is absorbing; operation requires a transient state")]
    AbsorbingTarget(State),
    #[error("state {0} is not in the study state space")]
    StateNotInSpace(State),
    #[error("cluster `{cluster}` has {size} members, exceeding the configured bound {bound}")]
    ClusterSizeBound {
        cluster: String,
        size: usize,
        bound: usize,
    },
    #[error("no observed response jumps for state {0}; percentile domain undefined")]
    NoResponseJumps(State),
    #[error("percentile bounds must satisfy 0 <= lo < hi <= 1 (got {lo}, {hi})")]
    BadPercentileBounds { lo: f64, hi: f64 },
    #[error("study has no clusters")]
    EmptyStudy,
    #[error("tau must be positive and finite")]
    BadTau,
}

/// Right-continuous step function with left limits.
///
/// `values` has one entry per segment; the value at a breakpoint is the new
/// segment's value.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction<T: Copy> {
    breakpoints: Vec<f64>,
    values: Vec<T>,
}

impl<T: Copy> StepFunction<T> {
    pub fn new(breakpoints: Vec<f64>, values: Vec<T>) -> Result<Self, DataError> {
        if values.len() != breakpoints.len() + 1 {
            return Err(DataError::ValueCountMismatch {
                values: values.len(),
                breakpoints: breakpoints.len(),
            });
        }
        if breakpoints.iter().any(|b| !b.is_finite())
            || breakpoints.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(DataError::InvalidBreakpoints);
        }
        Ok(Self {
            breakpoints,
            values,
        })
    }

    /// A function that is constant over the whole time axis.
    pub fn constant(value: T) -> Self {
        Self {
            breakpoints: Vec::new(),
            values: vec![value],
        }
    }

    /// Cadlag evaluation: the segment containing `t`, where a breakpoint
    /// belongs to the segment it opens.
    pub fn value_at(&self, t: f64) -> T {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        self.values[idx]
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_constant(&self) -> bool {
        self.breakpoints.is_empty()
    }
}

/// One individual's observed history.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub state_path: StepFunction<State>,
    /// min(loss-to-follow-up time, administrative time tau).
    pub censor_time: f64,
    /// Covariate processes, excluding the implicit intercept.
    pub covariates: Vec<StepFunction<f64>>,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub cluster_id: String,
    pub members: Vec<SubjectRecord>,
}

/// Which subjects count as at risk for a transient state.
///
/// The default rule treats every subject who has not been absorbed as at
/// risk. Designs where a subject can be alive yet structurally ineligible
/// for the state need their own variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[non_exhaustive]
pub enum AtRiskRule {
    #[default]
    Alive,
}

/// A full study: clusters of subjects on `[0, tau]`.
#[derive(Debug, Clone)]
pub struct StudyData {
    clusters: Vec<Cluster>,
    tau: f64,
    state_space: BTreeSet<State>,
    absorbing: BTreeSet<State>,
    n_covariates: usize,
}

impl StudyData {
    pub fn new(
        mut clusters: Vec<Cluster>,
        tau: f64,
        state_space: BTreeSet<State>,
        absorbing: BTreeSet<State>,
    ) -> Result<Self, DataError> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(DataError::BadTau);
        }
        if clusters.is_empty() {
            return Err(DataError::EmptyStudy);
        }
        // Canonical ordering makes slices, fingerprints, and fits invariant
        // to the order clusters and members arrive in.
        for cluster in &mut clusters {
            cluster.members.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        }
        clusters.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));

        let n_covariates = clusters[0]
            .members
            .first()
            .map(|s| s.covariates.len())
            .unwrap_or(0);
        for cluster in &clusters {
            if cluster.members.is_empty() {
                return Err(DataError::EmptyCluster(cluster.cluster_id.clone()));
            }
            for subject in &cluster.members {
                validate_subject(subject, tau, &state_space, &absorbing, n_covariates)?;
            }
        }
        Ok(Self {
            clusters,
            tau,
            state_space,
            absorbing,
            n_covariates,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn state_space(&self) -> &BTreeSet<State> {
        &self.state_space
    }

    pub fn absorbing(&self) -> &BTreeSet<State> {
        &self.absorbing
    }

    pub fn is_absorbing(&self, state: State) -> bool {
        self.absorbing.contains(&state)
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Validation of the bounded-cluster-size condition. Opt-in: real data
    /// should not hard-fail on a theoretical constant.
    pub fn check_max_cluster_size(&self, bound: usize) -> Result<(), DataError> {
        for cluster in &self.clusters {
            if cluster.members.len() > bound {
                return Err(DataError::ClusterSizeBound {
                    cluster: cluster.cluster_id.clone(),
                    size: cluster.members.len(),
                    bound,
                });
            }
        }
        Ok(())
    }

    /// Stable content hash over the canonical representation.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.tau.to_bits().to_le_bytes());
        for s in &self.state_space {
            hasher.update(s.to_le_bytes());
        }
        hasher.update([0xfe]);
        for s in &self.absorbing {
            hasher.update(s.to_le_bytes());
        }
        for cluster in &self.clusters {
            hasher.update([0xfd]);
            hasher.update(cluster.cluster_id.as_bytes());
            for subject in &cluster.members {
                hasher.update([0xfc]);
                hasher.update(subject.subject_id.as_bytes());
                hasher.update(subject.censor_time.to_bits().to_le_bytes());
                hash_step(&mut hasher, &subject.state_path, |v| {
                    (*v as u64).to_le_bytes()
                });
                for cov in &subject.covariates {
                    hash_step(&mut hasher, cov, |v| v.to_bits().to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hash_step<T: Copy>(
    hasher: &mut Sha256,
    f: &StepFunction<T>,
    encode: impl Fn(&T) -> [u8; 8],
) {
    hasher.update((f.breakpoints().len() as u64).to_le_bytes());
    for b in f.breakpoints() {
        hasher.update(b.to_bits().to_le_bytes());
    }
    for v in f.values() {
        hasher.update(encode(v));
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn validate_subject(
    subject: &SubjectRecord,
    tau: f64,
    state_space: &BTreeSet<State>,
    absorbing: &BTreeSet<State>,
    n_covariates: usize,
) -> Result<(), DataError> {
    if subject.covariates.len() != n_covariates {
        return Err(DataError::CovariateCountMismatch {
            subject: subject.subject_id.clone(),
            expected: n_covariates,
            found: subject.covariates.len(),
        });
    }
    if !(0.0..=tau).contains(&subject.censor_time) {
        return Err(DataError::TimeOutOfRange {
            subject: subject.subject_id.clone(),
            time: subject.censor_time,
            tau,
        });
    }
    let path = &subject.state_path;
    for &b in path.breakpoints() {
        if !(0.0..=tau).contains(&b) {
            return Err(DataError::TimeOutOfRange {
                subject: subject.subject_id.clone(),
                time: b,
                tau,
            });
        }
    }
    for (i, &state) in path.values().iter().enumerate() {
        if !state_space.contains(&state) {
            return Err(DataError::UnknownState {
                subject: subject.subject_id.clone(),
                state,
            });
        }
        // Once absorbed, the path must stay put.
        if i + 1 < path.values().len() && absorbing.contains(&state) {
            return Err(DataError::AbsorbingViolation {
                subject: subject.subject_id.clone(),
                state,
                time: path.breakpoints()[i],
            });
        }
    }
    Ok(())
}

/// At-risk indicator for transient state `h` at time `t`.
pub fn risk_indicator(
    subject: &SubjectRecord,
    absorbing: &BTreeSet<State>,
    h: State,
    _t: f64,
    rule: AtRiskRule,
) -> Result<u8, DataError> {
    if absorbing.contains(&h) {
        return Err(DataError::AbsorbingTarget(h));
    }
    match rule {
        AtRiskRule::Alive => {
            let state = subject.state_path.value_at(_t);
            Ok(u8::from(!absorbing.contains(&state)))
        }
    }
}

/// Missingness indicator: 1 iff the subject's triple is fully observed at
/// `t`. Observation at the censoring instant itself counts as observed.
pub fn missingness_indicator(subject: &SubjectRecord, t: f64) -> u8 {
    u8::from(t <= subject.censor_time)
}

/// One evaluated cross-section of the study: per-subject response, at-risk,
/// and missingness indicators plus the design row (intercept first).
///
/// Rows are stored flat in canonical order; `cluster_of_row` maps each row to
/// its cluster index and `cluster_sizes[i]` is the full member count of
/// cluster `i` (the inverse-size weight basis, independent of `t`).
#[derive(Debug, Clone)]
pub struct Slice {
    pub t: f64,
    /// Number of covariates excluding the intercept.
    pub n_covariates: usize,
    pub cluster_of_row: Vec<u32>,
    pub cluster_sizes: Vec<u32>,
    pub y: Vec<u8>,
    pub s: Vec<u8>,
    pub r: Vec<u8>,
    /// Row-major design rows of width `n_covariates + 1`; column 0 is 1.
    pub x: Vec<f64>,
}

impl Slice {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.n_covariates + 1
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn row_x(&self, row: usize) -> &[f64] {
        let d = self.dim();
        &self.x[row * d..(row + 1) * d]
    }

    fn with_capacity(data: &StudyData) -> Self {
        let n = data.n_subjects();
        let d = data.n_covariates() + 1;
        Slice {
            t: 0.0,
            n_covariates: data.n_covariates(),
            cluster_of_row: Vec::with_capacity(n),
            cluster_sizes: data
                .clusters()
                .iter()
                .map(|c| c.members.len() as u32)
                .collect(),
            y: Vec::with_capacity(n),
            s: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            x: Vec::with_capacity(n * d),
        }
    }
}

/// Evaluate the study at a fixed time, one row per subject per cluster.
pub fn slice_at(data: &StudyData, h: State, t: f64) -> Result<Slice, DataError> {
    if data.is_absorbing(h) {
        return Err(DataError::AbsorbingTarget(h));
    }
    if !data.state_space().contains(&h) {
        return Err(DataError::StateNotInSpace(h));
    }
    let mut scanner = PathScanner::new(data, h, AtRiskRule::Alive);
    let mut slice = Slice::with_capacity(data);
    scanner.fill(&mut slice, t);
    Ok(slice)
}

/// Incremental slice evaluator.
///
/// Holds one segment cursor per subject path; filling at nondecreasing times
/// advances cursors in O(1) amortized. `fill` also accepts out-of-order times
/// by resetting the cursors.
pub struct PathScanner<'a> {
    data: &'a StudyData,
    h: State,
    rule: AtRiskRule,
    /// (cluster index, subject ref) flattened in canonical order.
    subjects: Vec<(u32, &'a SubjectRecord)>,
    state_cursor: Vec<usize>,
    cov_cursor: Vec<usize>,
    last_t: f64,
    /// With all-constant covariates the design columns never change, so a
    /// slice this scanner has already filled keeps them.
    constant_covariates: bool,
    x_primed: bool,
    /// Absorption flag per state label, replacing set probes in the fill loop.
    absorbing_lut: Vec<bool>,
}

impl<'a> PathScanner<'a> {
    pub fn new(data: &'a StudyData, h: State, rule: AtRiskRule) -> Self {
        let mut subjects = Vec::with_capacity(data.n_subjects());
        for (ci, cluster) in data.clusters().iter().enumerate() {
            for subject in &cluster.members {
                subjects.push((ci as u32, subject));
            }
        }
        let n = subjects.len();
        let p = data.n_covariates();
        let constant_covariates = subjects
            .iter()
            .all(|(_, s)| s.covariates.iter().all(|c| c.is_constant()));
        let max_state = data.state_space().iter().max().copied().unwrap_or(0);
        let mut absorbing_lut = vec![false; max_state as usize + 1];
        for &s in data.absorbing() {
            absorbing_lut[s as usize] = true;
        }
        PathScanner {
            data,
            h,
            rule,
            subjects,
            state_cursor: vec![0; n],
            cov_cursor: vec![0; n * p],
            last_t: f64::NEG_INFINITY,
            constant_covariates,
            x_primed: false,
            absorbing_lut,
        }
    }

    fn reset(&mut self) {
        self.state_cursor.iter_mut().for_each(|c| *c = 0);
        self.cov_cursor.iter_mut().for_each(|c| *c = 0);
        self.last_t = f64::NEG_INFINITY;
    }

    /// Fill `slice` with the study evaluated at `t`.
    pub fn fill(&mut self, slice: &mut Slice, t: f64) {
        if t < self.last_t {
            self.reset();
        }
        self.last_t = t;

        let p = self.data.n_covariates();
        let keep_x = self.constant_covariates
            && self.x_primed
            && slice.x.len() == self.subjects.len() * (p + 1);
        slice.t = t;
        slice.y.clear();
        slice.s.clear();
        slice.r.clear();
        if !keep_x {
            slice.cluster_of_row.clear();
            slice.x.clear();
        }

        for (idx, &(ci, subject)) in self.subjects.iter().enumerate() {
            let bps = subject.state_path.breakpoints();
            let cur = &mut self.state_cursor[idx];
            while *cur < bps.len() && bps[*cur] <= t {
                *cur += 1;
            }
            let state = subject.state_path.values()[*cur];

            let y = u8::from(state == self.h);
            let s = match self.rule {
                AtRiskRule::Alive => u8::from(!self.absorbing_lut[state as usize]),
            };
            let r = u8::from(t <= subject.censor_time);

            slice.y.push(y);
            slice.s.push(s);
            slice.r.push(r);
            if keep_x {
                continue;
            }
            slice.cluster_of_row.push(ci);
            slice.x.push(1.0);
            for (k, cov) in subject.covariates.iter().enumerate() {
                let cbps = cov.breakpoints();
                let ccur = &mut self.cov_cursor[idx * p + k];
                while *ccur < cbps.len() && cbps[*ccur] <= t {
                    *ccur += 1;
                }
                slice.x.push(cov.values()[*ccur]);
            }
        }
        self.x_primed = true;
    }
}

/// The jump-time grid: sorted distinct union of all state-transition times,
/// censoring times, and covariate breakpoints. The coefficient path is
/// piecewise constant between these points, so estimation happens exactly
/// here.
pub fn jump_grid(data: &StudyData, h: State) -> Result<Vec<f64>, DataError> {
    if data.is_absorbing(h) {
        return Err(DataError::AbsorbingTarget(h));
    }
    let mut times = Vec::new();
    for cluster in data.clusters() {
        for subject in &cluster.members {
            times.extend_from_slice(subject.state_path.breakpoints());
            times.push(subject.censor_time);
            for cov in &subject.covariates {
                times.extend_from_slice(cov.breakpoints());
            }
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    Ok(times)
}

/// Pooled observed times at which the response process for state `h` jumps:
/// entries into or exits from `h`, kept if observed (time <= censor time).
/// Returned sorted, with multiplicity.
pub fn response_jump_times(data: &StudyData, h: State) -> Vec<f64> {
    let mut times = Vec::new();
    for cluster in data.clusters() {
        for subject in &cluster.members {
            let path = &subject.state_path;
            for (i, &bp) in path.breakpoints().iter().enumerate() {
                let before = path.values()[i];
                let after = path.values()[i + 1];
                if (before == h) != (after == h) && bp <= subject.censor_time {
                    times.push(bp);
                }
            }
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times
}

/// Empirical percentiles of the observed response-jump times, defining the
/// restricted band/test domain. Defaults elsewhere are (0.10, 0.90).
pub fn response_jump_percentiles(
    data: &StudyData,
    h: State,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64), DataError> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(DataError::BadPercentileBounds { lo, hi });
    }
    let times = response_jump_times(data, h);
    if times.is_empty() {
        return Err(DataError::NoResponseJumps(h));
    }
    Ok((percentile_sorted(&times, lo), percentile_sorted(&times, hi)))
}

/// Linear interpolation between order statistics at rank `p * n` (clamped to
/// the extremes). On `{1,...,100}` this yields exactly 10 and 90 for the
/// default (0.10, 0.90) bounds.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let rank = p * n as f64;
    if rank <= 1.0 {
        return sorted[0];
    }
    if rank >= n as f64 {
        return sorted[n - 1];
    }
    let k = rank.floor();
    let frac = rank - k;
    let idx = k as usize - 1;
    sorted[idx] + frac * (sorted[idx + 1] - sorted[idx])
}
