//! Command-line interface: fit coefficient paths, compute bands and tests,
//! simulate datasets, and run replication studies.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsoreg::data::State;
use tsoreg::dgp::{simulate_study, SimConfig};
use tsoreg::inference::fit_with_influence;
use tsoreg::io::{
    parse_long_csv, write_band_csv, write_fit_csv, write_long_csv, write_mc_csvs,
    write_test_json, CsvSchema, RunMeta,
};
use tsoreg::link::{LinkFamily, VarianceWeight};
use tsoreg::montecarlo::{Preset, PresetPlan};
use tsoreg::multiplier::{confidence_band, ks_test};
use tsoreg::solver::{FitConfig, WeightMode};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tsoreg",
    version,
    about = "Marginal regression on transient state occupation probabilities",
    long_about = "Estimates time-varying regression coefficients for the probability of \
occupying a transient state, from clustered right-censored multistate data. \
Option precedence: command-line flag > config file > built-in default."
)]
struct Cli {
    /// Link function for the marginal model.
    #[arg(long, global = true, default_value = "logit")]
    link: LinkFamily,
    /// Cluster weighting: tcm (1/M_i), acm (unweighted), iid (ignore clustering).
    #[arg(long, global = true, default_value = "tcm")]
    mode: WeightMode,
    /// Transient state of interest.
    #[arg(long, global = true, default_value_t = 2)]
    state: State,
    /// Master RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores; TSOREG_THREADS overrides the default).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SchemaArgs {
    /// Input CSV path.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "cluster_id")]
    cluster_col: String,
    #[arg(long, default_value = "subject_id")]
    subject_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "state")]
    state_col: String,
    /// Covariate columns, comma separated (default: every other column).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, default_value = "C")]
    censor_marker: String,
    /// Absorbing states, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    absorbing: Vec<State>,
    /// Full state space (default: inferred from the data).
    #[arg(long, value_delimiter = ',')]
    states: Vec<State>,
    /// Maximum follow-up time (default: largest time in the file).
    #[arg(long)]
    tau: Option<f64>,
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            cluster_col: self.cluster_col.clone(),
            subject_col: self.subject_col.clone(),
            time_col: self.time_col.clone(),
            state_col: self.state_col.clone(),
            covariate_cols: self.covariates.clone(),
            censor_marker: self.censor_marker.clone(),
            absorbing: self.absorbing.iter().copied().collect(),
            states: if self.states.is_empty() {
                None
            } else {
                Some(self.states.iter().copied().collect())
            },
            tau: self.tau,
        }
    }
}

#[derive(Args, Clone)]
struct FitTuning {
    /// Variance weight in the estimating equation.
    #[arg(long, default_value = "canonical")]
    variance: String,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the coefficient path with pointwise standard errors.
    Fit {
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        tuning: FitTuning,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simultaneous confidence bands over a restricted domain.
    Band {
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        tuning: FitTuning,
        #[arg(long)]
        out: PathBuf,
        /// Coefficient indices (default: all).
        #[arg(long, value_delimiter = ',')]
        coef: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Bootstrap draws.
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        /// Domain percentiles over observed response-jump times, "lo,hi".
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.10, 0.90])]
        domain: Vec<f64>,
    },
    /// Weighted Kolmogorov-Smirnov tests of zero covariate effect.
    Test {
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        tuning: FitTuning,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        coef: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.10, 0.90])]
        domain: Vec<f64>,
    },
    /// Generate a clustered multistate dataset.
    Simulate {
        /// Simulation config JSON (flags override file values).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of clusters.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo replication study.
    Replicate {
        #[arg(long)]
        preset: Preset,
        /// Output directory for the table CSVs and JSON report.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Number of clusters.
        #[arg(long)]
        n: Option<usize>,
        /// Bootstrap draws for bands/tests.
        #[arg(long)]
        boot: Option<usize>,
        /// Marginal effect sizes (table3), comma separated.
        #[arg(long, value_delimiter = ',')]
        effects: Vec<f64>,
        /// Weight modes to run.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<WeightMode>,
        /// Coefficients for bands/tests.
        #[arg(long, value_delimiter = ',')]
        coefs: Vec<usize>,
    },
}

#[derive(Debug)]
enum AppError {
    Data(String),
    Numeric(String),
    Usage(String),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Data(_) => EXIT_DATA,
            AppError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Data(m) | AppError::Numeric(m) | AppError::Usage(m) => m,
        }
    }
}

impl From<tsoreg::io::IoError> for AppError {
    fn from(e: tsoreg::io::IoError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<tsoreg::data::DataError> for AppError {
    fn from(e: tsoreg::data::DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<tsoreg::solver::FitError> for AppError {
    fn from(e: tsoreg::solver::FitError) -> Self {
        match e {
            tsoreg::solver::FitError::Data(d) => AppError::Data(d.to_string()),
            other => AppError::Numeric(other.to_string()),
        }
    }
}

impl From<tsoreg::multiplier::MultiplierError> for AppError {
    fn from(e: tsoreg::multiplier::MultiplierError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<tsoreg::dgp::DgpError> for AppError {
    fn from(e: tsoreg::dgp::DgpError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<tsoreg::montecarlo::McError> for AppError {
    fn from(e: tsoreg::montecarlo::McError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

fn thread_count(cli_threads: Option<usize>) -> usize {
    cli_threads
        .or_else(|| {
            std::env::var("TSOREG_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

fn fit_config(cli: &Cli, tuning: &FitTuning) -> Result<FitConfig, AppError> {
    let variance = match tuning.variance.as_str() {
        "canonical" => VarianceWeight::Canonical,
        "unit" => VarianceWeight::Unit,
        other => {
            return Err(AppError::Usage(format!(
                "unknown variance weight `{other}` (expected canonical|unit)"
            )))
        }
    };
    let cfg = FitConfig {
        link: cli.link,
        variance,
        weight_mode: cli.mode,
        max_iter: tuning.max_iter,
        tol: tuning.tol,
        ridge: tuning.ridge,
    };
    cfg.validate().map_err(AppError::Usage)?;
    Ok(cfg)
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool, AppError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| AppError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), AppError> {
    let threads = thread_count(cli.threads);
    match &cli.command {
        Command::Fit {
            schema,
            tuning,
            out,
        } => {
            let cfg = fit_config(&cli, tuning)?;
            let data = parse_long_csv(&schema.input, &schema.schema())?;
            let pool = build_pool(threads)?;
            let (fit, infl) = pool
                .install(|| fit_with_influence(&data, cli.state, &cfg))
                .map_err(AppError::from)?;
            let se = tsoreg::inference::pointwise_se(&fit, &infl);
            let meta = RunMeta::new(cli.seed, &cfg);
            let file = std::fs::File::create(out).map_err(tsoreg::io::IoError::from)?;
            write_fit_csv(&fit, &se, &meta, file)?;
            Ok(())
        }
        Command::Band {
            schema,
            tuning,
            out,
            coef,
            alpha,
            boot,
            domain,
        } => {
            let cfg = fit_config(&cli, tuning)?;
            let data = parse_long_csv(&schema.input, &schema.schema())?;
            let (fit, infl) = fit_with_influence(&data, cli.state, &cfg)?;
            let abs_domain =
                tsoreg::data::response_jump_percentiles(&data, cli.state, domain[0], domain[1])?;
            let coefs = if coef.is_empty() {
                (0..infl.dim).collect()
            } else {
                coef.clone()
            };
            let pool = build_pool(threads)?;
            let bands = pool.install(|| {
                coefs
                    .iter()
                    .map(|&l| {
                        confidence_band(&fit, &infl, l, *alpha, *boot, abs_domain, cli.seed, true)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })?;
            for band in &bands {
                if band.excluded > 0 {
                    eprintln!(
                        "warning: coefficient {}: {} grid points in the domain were not estimable and were excluded",
                        band.coefficient, band.excluded
                    );
                }
            }
            let meta = RunMeta::new(cli.seed, &cfg);
            let file = std::fs::File::create(out).map_err(tsoreg::io::IoError::from)?;
            write_band_csv(&bands, &meta, file)?;
            Ok(())
        }
        Command::Test {
            schema,
            tuning,
            out,
            coef,
            boot,
            domain,
        } => {
            let cfg = fit_config(&cli, tuning)?;
            let data = parse_long_csv(&schema.input, &schema.schema())?;
            let (fit, infl) = fit_with_influence(&data, cli.state, &cfg)?;
            let abs_domain =
                tsoreg::data::response_jump_percentiles(&data, cli.state, domain[0], domain[1])?;
            let coefs = if coef.is_empty() {
                (1..infl.dim).collect()
            } else {
                coef.clone()
            };
            let pool = build_pool(threads)?;
            let tests = pool.install(|| {
                coefs
                    .iter()
                    .map(|&l| ks_test(&fit, &infl, l, *boot, abs_domain, cli.seed, true))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            for test in &tests {
                if test.excluded > 0 {
                    eprintln!(
                        "warning: coefficient {}: {} grid points in the domain were not estimable and were excluded",
                        test.coefficient, test.excluded
                    );
                }
            }
            let meta = RunMeta::new(cli.seed, &cfg);
            let file = std::fs::File::create(out).map_err(tsoreg::io::IoError::from)?;
            write_test_json(&tests, &meta, file)?;
            Ok(())
        }
        Command::Simulate { config, n, out } => {
            let mut sim = match config {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(path).map_err(tsoreg::io::IoError::from)?;
                    serde_json::from_str::<SimConfig>(&text)
                        .map_err(|e| AppError::Usage(format!("bad sim config: {e}")))?
                }
                None => SimConfig::new(n.unwrap_or(50), cli.seed),
            };
            if let Some(n) = n {
                sim.n_clusters = *n;
            }
            if cli.seed != 0 || config.is_none() {
                sim.rng_seed = cli.seed;
            }
            let (data, _) = simulate_study(&sim)?;
            let meta = RunMeta::new(sim.rng_seed, &sim);
            let file = std::fs::File::create(out).map_err(tsoreg::io::IoError::from)?;
            write_long_csv(&data, &meta, file)?;
            Ok(())
        }
        Command::Replicate {
            preset,
            out_dir,
            reps,
            n,
            boot,
            effects,
            modes,
            coefs,
        } => {
            let mut plan = PresetPlan::new(*preset, n.unwrap_or(50), cli.seed);
            plan.fit.link = cli.link;
            if let Some(reps) = reps {
                plan.settings.reps = *reps;
            }
            if !modes.is_empty() {
                plan.settings.modes = modes.clone();
            }
            if !effects.is_empty() {
                plan.effects = effects.clone();
            }
            if let Some(boot) = boot {
                if let Some(band) = &mut plan.settings.band {
                    band.draws = *boot;
                }
                if let Some(test) = &mut plan.settings.test {
                    test.draws = *boot;
                }
            }
            if !coefs.is_empty() {
                if let Some(band) = &mut plan.settings.band {
                    band.coefficients = coefs.clone();
                }
                if let Some(test) = &mut plan.settings.test {
                    test.coefficients = coefs.clone();
                }
            }
            plan.settings.threads = threads;
            let runs = plan.run()?;
            let meta = RunMeta::new(cli.seed, &plan.settings);
            write_mc_csvs(&runs, &meta, out_dir)?;
            Ok(())
        }
    }
}
