//! Long-format CSV ingestion, result serialization, and run metadata.
//!
//! Input files are UTF-8 CSV with a header. Each row carries
//! `(cluster, subject, time, state-or-censor-marker, covariates...)`; a
//! subject's rows are time-ordered and end-of-follow-up is marked by one row
//! whose state column holds the censor marker. Output files start with a
//! `#` metadata line (tool version, seed, config hash) that the reader
//! skips; numeric cells use 17 significant digits so values round-trip
//! exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{hex_string, Cluster, DataError, State, StepFunction, StudyData, SubjectRecord};
use crate::montecarlo::MCReport;
use crate::multiplier::{BandResult, TestResult};
use crate::solver::{FitResult, PointStatus};

pub const TOOL_NAME: &str = "tsoreg";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: cannot parse `{value}` as a number in column `{column}`")]
    BadNumber {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: state `{value}` is not in the declared state space")]
    UnknownState { line: u64, value: String },
    #[error("line {line}: time goes backwards for subject `{subject}`")]
    UnsortedTimes { line: u64, subject: String },
    #[error("line {line}: duplicate row for subject `{subject}` at time {time}")]
    DuplicateTime {
        line: u64,
        subject: String,
        time: f64,
    },
    #[error("line {line}: second censor marker for subject `{subject}`")]
    DuplicateCensorMarker { line: u64, subject: String },
    #[error("subject `{0}` has no censor/end marker row")]
    MissingCensorMarker(String),
    #[error("input contains no data rows")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Column mapping and study declaration for long-format ingestion.
#[derive(Debug, Clone, Serialize)]
pub struct CsvSchema {
    pub cluster_col: String,
    pub subject_col: String,
    pub time_col: String,
    pub state_col: String,
    /// Empty means: every other column is a covariate, in header order.
    pub covariate_cols: Vec<String>,
    pub censor_marker: String,
    pub absorbing: BTreeSet<State>,
    /// None infers the space from the data plus `absorbing`.
    pub states: Option<BTreeSet<State>>,
    /// None uses the maximum observed time.
    pub tau: Option<f64>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            cluster_col: "cluster_id".into(),
            subject_col: "subject_id".into(),
            time_col: "time".into(),
            state_col: "state".into(),
            covariate_cols: Vec::new(),
            censor_marker: "C".into(),
            absorbing: BTreeSet::from([3]),
            states: None,
            tau: None,
        }
    }
}

struct SubjectAccum {
    state_times: Vec<f64>,
    states: Vec<State>,
    cov_values: Vec<Vec<f64>>,
    censor: Option<f64>,
    last_time: Option<f64>,
}

/// Parse a long-format CSV file into a validated study.
pub fn parse_long_csv(path: &Path, schema: &CsvSchema) -> Result<StudyData, IoError> {
    let file = std::fs::File::open(path)?;
    parse_long_reader(file, schema)
}

pub fn parse_long_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<StudyData, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, IoError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn(name.to_string()))
    };
    let cluster_idx = col(&schema.cluster_col)?;
    let subject_idx = col(&schema.subject_col)?;
    let time_idx = col(&schema.time_col)?;
    let state_idx = col(&schema.state_col)?;
    let covariate_names: Vec<String> = if schema.covariate_cols.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![cluster_idx, subject_idx, time_idx, state_idx].contains(i))
            .map(|(_, h)| h.to_string())
            .collect()
    } else {
        schema.covariate_cols.clone()
    };
    let cov_idx: Vec<usize> = covariate_names
        .iter()
        .map(|name| col(name))
        .collect::<Result<_, _>>()?;

    let mut subjects: BTreeMap<String, BTreeMap<String, SubjectAccum>> = BTreeMap::new();
    let mut seen_states: BTreeSet<State> = BTreeSet::new();
    let mut max_time = 0.0f64;
    let mut any = false;

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        any = true;

        let cluster = record.get(cluster_idx).unwrap_or("").to_string();
        let subject = record.get(subject_idx).unwrap_or("").to_string();
        let time_str = record.get(time_idx).unwrap_or("");
        let time: f64 = time_str.parse().map_err(|_| IoError::BadNumber {
            line,
            column: schema.time_col.clone(),
            value: time_str.to_string(),
        })?;
        max_time = max_time.max(time);

        let accum = subjects
            .entry(cluster)
            .or_default()
            .entry(subject.clone())
            .or_insert_with(|| SubjectAccum {
                state_times: Vec::new(),
                states: Vec::new(),
                cov_values: vec![Vec::new(); cov_idx.len()],
                censor: None,
                last_time: None,
            });

        if let Some(last) = accum.last_time {
            if time < last {
                return Err(IoError::UnsortedTimes { line, subject });
            }
        }
        accum.last_time = Some(time);

        let state_str = record.get(state_idx).unwrap_or("");
        if state_str == schema.censor_marker {
            if accum.censor.is_some() {
                return Err(IoError::DuplicateCensorMarker { line, subject });
            }
            accum.censor = Some(time);
            continue;
        }

        let state: State = state_str.parse().map_err(|_| IoError::UnknownState {
            line,
            value: state_str.to_string(),
        })?;
        if let Some(space) = &schema.states {
            if !space.contains(&state) {
                return Err(IoError::UnknownState {
                    line,
                    value: state_str.to_string(),
                });
            }
        }
        seen_states.insert(state);

        if accum.state_times.last() == Some(&time) {
            return Err(IoError::DuplicateTime {
                line,
                subject,
                time,
            });
        }
        accum.state_times.push(time);
        accum.states.push(state);
        for (k, &ci) in cov_idx.iter().enumerate() {
            let v = record.get(ci).unwrap_or("");
            let value: f64 = v.parse().map_err(|_| IoError::BadNumber {
                line,
                column: covariate_names[k].clone(),
                value: v.to_string(),
            })?;
            accum.cov_values[k].push(value);
        }
    }
    if !any {
        return Err(IoError::Empty);
    }

    let tau = schema.tau.unwrap_or(max_time);
    let mut clusters = Vec::with_capacity(subjects.len());
    for (cluster_id, members) in subjects {
        let mut records = Vec::with_capacity(members.len());
        for (subject_id, accum) in members {
            let censor_time = accum
                .censor
                .ok_or_else(|| IoError::MissingCensorMarker(subject_id.clone()))?;
            records.push(build_subject(subject_id, accum, censor_time)?);
        }
        clusters.push(Cluster {
            cluster_id,
            members: records,
        });
    }

    let state_space = match &schema.states {
        Some(space) => space.clone(),
        None => {
            let mut space = seen_states;
            space.extend(schema.absorbing.iter().copied());
            space
        }
    };
    Ok(StudyData::new(
        clusters,
        tau,
        state_space,
        schema.absorbing.clone(),
    )?)
}

/// Compress row sequences into step functions: the first row sets the
/// initial value, later rows add a breakpoint where the value changes.
fn build_subject(
    subject_id: String,
    accum: SubjectAccum,
    censor_time: f64,
) -> Result<SubjectRecord, IoError> {
    let mut state_bps = Vec::new();
    let mut state_vals: Vec<State> = Vec::new();
    for (k, &state) in accum.states.iter().enumerate() {
        if k == 0 {
            state_vals.push(state);
        } else if state != *state_vals.last().unwrap() {
            state_bps.push(accum.state_times[k]);
            state_vals.push(state);
        }
    }
    if state_vals.is_empty() {
        return Err(IoError::MissingCensorMarker(subject_id));
    }

    let mut covariates = Vec::with_capacity(accum.cov_values.len());
    for series in &accum.cov_values {
        let mut bps = Vec::new();
        let mut vals = Vec::new();
        for (k, &v) in series.iter().enumerate() {
            if k == 0 {
                vals.push(v);
            } else if v != *vals.last().unwrap() {
                bps.push(accum.state_times[k]);
                vals.push(v);
            }
        }
        covariates.push(StepFunction::new(bps, vals).map_err(IoError::Data)?);
    }

    Ok(SubjectRecord {
        subject_id,
        state_path: StepFunction::new(state_bps, state_vals).map_err(IoError::Data)?,
        censor_time,
        covariates,
    })
}

/// Metadata stamped on every output file.
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
}

impl RunMeta {
    pub fn new<T: Serialize>(seed: u64, config: &T) -> Self {
        RunMeta {
            seed,
            config_hash: config_hash(config),
        }
    }

    fn header_line(&self) -> String {
        format!(
            "# {TOOL_NAME} {TOOL_VERSION} seed={} config={}\n",
            self.seed, self.config_hash
        )
    }
}

/// Short hash of a serializable configuration, for reproducibility audits.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).unwrap_or_default();
    let digest = Sha256::digest(json.as_bytes());
    hex_string(&digest[..6])
}

/// 17-significant-digit, locale-independent float formatting.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// Write a study in long format (inverse of [`parse_long_csv`]).
pub fn write_long_csv<W: Write>(
    data: &StudyData,
    meta: &RunMeta,
    mut out: W,
) -> Result<(), IoError> {
    out.write_all(meta.header_line().as_bytes())?;
    let p = data.n_covariates();
    let mut header = String::from("cluster_id,subject_id,time,state");
    for k in 1..=p {
        header.push_str(&format!(",x{k}"));
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;

    for cluster in data.clusters() {
        for subject in &cluster.members {
            // rows at time zero, every breakpoint, and the censor marker,
            // emitted in one time-ordered stream; at a shared instant the
            // transition row precedes the marker
            let mut times: Vec<f64> = vec![0.0];
            times.extend_from_slice(subject.state_path.breakpoints());
            for cov in &subject.covariates {
                times.extend_from_slice(cov.breakpoints());
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times.dedup();
            let censor = subject.censor_time;
            let mut censor_written = false;
            for &t in &times {
                if !censor_written && censor < t {
                    write_row(&mut out, cluster, subject, censor, "C")?;
                    censor_written = true;
                }
                write_row(
                    &mut out,
                    cluster,
                    subject,
                    t,
                    &subject.state_path.value_at(t).to_string(),
                )?;
            }
            if !censor_written {
                write_row(&mut out, cluster, subject, censor, "C")?;
            }
        }
    }
    Ok(())
}

fn write_row<W: Write>(
    out: &mut W,
    cluster: &Cluster,
    subject: &SubjectRecord,
    t: f64,
    state: &str,
) -> Result<(), IoError> {
    let mut line = format!(
        "{},{},{},{}",
        cluster.cluster_id,
        subject.subject_id,
        fmt_f64(t),
        state
    );
    for cov in &subject.covariates {
        line.push(',');
        line.push_str(&fmt_f64(cov.value_at(t)));
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    Ok(())
}

/// Coefficient path with pointwise standard errors, one row per grid time.
pub fn write_fit_csv<W: Write>(
    fit: &FitResult,
    se: &[Option<Vec<f64>>],
    meta: &RunMeta,
    mut out: W,
) -> Result<(), IoError> {
    out.write_all(meta.header_line().as_bytes())?;
    let dim = fit.dim();
    let mut header = String::from("t");
    for l in 0..dim {
        header.push_str(&format!(",beta_{l}"));
    }
    for l in 0..dim {
        header.push_str(&format!(",se_{l}"));
    }
    header.push_str(",converged\n");
    out.write_all(header.as_bytes())?;

    for (k, point) in fit.points.iter().enumerate() {
        let mut line = fmt_f64(point.t);
        for l in 0..dim {
            line.push(',');
            if let Some(b) = point.beta.get(l) {
                line.push_str(&fmt_f64(*b));
            }
        }
        for l in 0..dim {
            line.push(',');
            if let Some(se_vec) = se.get(k).and_then(|s| s.as_ref()) {
                line.push_str(&fmt_f64(se_vec[l]));
            }
        }
        line.push_str(&format!(",{}\n", point.status == PointStatus::Converged));
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Band paths for one or more coefficients, stacked long.
pub fn write_band_csv<W: Write>(
    bands: &[BandResult],
    meta: &RunMeta,
    mut out: W,
) -> Result<(), IoError> {
    out.write_all(meta.header_line().as_bytes())?;
    out.write_all(b"coefficient,t,estimate,lower,upper,c_alpha,alpha,b_draws,domain_lo,domain_hi\n")?;
    for band in bands {
        for (k, &t) in band.times.iter().enumerate() {
            let line = format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                band.coefficient,
                fmt_f64(t),
                fmt_f64(band.estimate[k]),
                fmt_f64(band.lower[k]),
                fmt_f64(band.upper[k]),
                fmt_f64(band.c_alpha),
                fmt_f64(band.alpha),
                band.b_draws,
                fmt_f64(band.domain.0),
                fmt_f64(band.domain.1),
            );
            out.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TestReport<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a str,
    results: Vec<TestEntry>,
}

#[derive(Serialize)]
struct TestEntry {
    coefficient: usize,
    k_stat: f64,
    p_value: f64,
    b_draws: usize,
    domain: [f64; 2],
    excluded: usize,
}

/// KS test results as JSON.
pub fn write_test_json<W: Write>(
    tests: &[TestResult],
    meta: &RunMeta,
    out: W,
) -> Result<(), IoError> {
    let report = TestReport {
        tool: TOOL_NAME,
        version: TOOL_VERSION,
        seed: meta.seed,
        config: &meta.config_hash,
        results: tests
            .iter()
            .map(|t| TestEntry {
                coefficient: t.coefficient,
                k_stat: t.k_stat,
                p_value: t.p_value,
                b_draws: t.b_draws,
                domain: [t.domain.0, t.domain.1],
                excluded: t.excluded,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(out, &report).map_err(std::io::Error::other)?;
    Ok(())
}

/// Monte Carlo summary tables: one row per cell, with the scenario's marginal
/// effect size attached.
pub fn write_mc_csvs(
    runs: &[(f64, MCReport)],
    meta: &RunMeta,
    dir: &Path,
) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;

    let mut pw = std::fs::File::create(dir.join("pointwise.csv"))?;
    pw.write_all(meta.header_line().as_bytes())?;
    pw.write_all(b"effect,mode,coefficient,t,truth,bias,ase,mcsd,cp,cp_mc_se,n_used\n")?;
    for (effect, report) in runs {
        for cell in &report.pointwise {
            let line = format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                fmt_f64(*effect),
                cell.mode,
                cell.coefficient,
                fmt_f64(cell.t),
                fmt_f64(cell.truth),
                fmt_f64(cell.bias),
                fmt_f64(cell.ase),
                fmt_f64(cell.mcsd),
                fmt_f64(cell.cp),
                fmt_f64(cell.cp_mc_se),
                cell.n_used,
            );
            pw.write_all(line.as_bytes())?;
        }
    }

    let mut bd = std::fs::File::create(dir.join("bands.csv"))?;
    bd.write_all(meta.header_line().as_bytes())?;
    bd.write_all(b"effect,mode,coefficient,coverage,mc_se,n_used\n")?;
    for (effect, report) in runs {
        for cell in &report.bands {
            let line = format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(*effect),
                cell.mode,
                cell.coefficient,
                fmt_f64(cell.coverage),
                fmt_f64(cell.mc_se),
                cell.n_used,
            );
            bd.write_all(line.as_bytes())?;
        }
    }

    let mut ts = std::fs::File::create(dir.join("tests.csv"))?;
    ts.write_all(meta.header_line().as_bytes())?;
    ts.write_all(b"effect,mode,coefficient,rejection_rate,mc_se,n_used\n")?;
    for (effect, report) in runs {
        for cell in &report.tests {
            let line = format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(*effect),
                cell.mode,
                cell.coefficient,
                fmt_f64(cell.rejection_rate),
                fmt_f64(cell.mc_se),
                cell.n_used,
            );
            ts.write_all(line.as_bytes())?;
        }
    }

    #[derive(Serialize)]
    struct JsonRun<'a> {
        effect: f64,
        report: &'a MCReport,
    }
    #[derive(Serialize)]
    struct JsonReport<'a> {
        tool: &'static str,
        version: &'static str,
        seed: u64,
        config: &'a str,
        runs: Vec<JsonRun<'a>>,
    }
    let json = JsonReport {
        tool: TOOL_NAME,
        version: TOOL_VERSION,
        seed: meta.seed,
        config: &meta.config_hash,
        runs: runs
            .iter()
            .map(|(effect, report)| JsonRun {
                effect: *effect,
                report,
            })
            .collect(),
    };
    let file = std::fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(file, &json).map_err(std::io::Error::other)?;
    Ok(())
}
