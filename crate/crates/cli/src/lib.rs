//! Command-line front end: sample sizes, q sweeps, simulation, fitting and
//! Monte Carlo studies.

pub mod config;

use std::fmt::Write as _;
use std::hash::{BuildHasher, RandomState};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use zipcrt::design::{
    pairwise_covariance_factor, pairwise_covariance_factor_printed, DesignInputs,
};
use zipcrt::gee::{fit_gee, TestReference};
use zipcrt::manifest::RunManifest;
use zipcrt::power::{
    design_variance, design_variance_with, q_sweep, sample_size_normal, sample_size_t,
    CovarianceForm,
};
use zipcrt::simulate::{generate_trial, TrialDataset};
use zipcrt::study::{
    reproduce_tables, run_power_study, DfRule, Sizing, StudyConfig, TableId, TableOptions,
};

use config::ConfigFile;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<zipcrt::Error> for CliError {
    fn from(e: zipcrt::Error) -> Self {
        use zipcrt::Error as E;
        let code = match e {
            E::Domain(_)
            | E::Infeasible(_)
            | E::UndefinedEffect
            | E::DegenerateAllocation(_)
            | E::InsufficientClusters(_)
            | E::Configuration(_)
            | E::UnknownTable(_)
            | E::Dataset(_)
            | E::Csv(_) => EXIT_VALIDATION,
            E::Estimation(_)
            | E::NonConvergence { .. }
            | E::StudyFailures { .. }
            | E::Io(_)
            | E::Manifest(_) => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "zipcrt",
    version,
    about = "Design and analysis of cluster randomized trials with zero-inflated counts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Required numbers of clusters under normal and t approximations.
    Samplesize(SampleSizeArgs),
    /// Sample sizes across values of q.
    Sweep(SweepArgs),
    /// Simulate one trial and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit the marginalized ZIP model to a trial dataset.
    Fit(FitArgs),
    /// Monte Carlo type I error or power study.
    Study(StudyArgs),
    /// Regenerate the simulation tables.
    Tables(TablesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SizingArg {
    Z,
    T,
}

impl From<SizingArg> for Sizing {
    fn from(s: SizingArg) -> Self {
        match s {
            SizingArg::Z => Sizing::Z,
            SizingArg::T => Sizing::T,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DfRuleArg {
    #[value(name = "n-2")]
    NMinus2,
    #[value(name = "n-4")]
    NMinus4,
}

impl From<DfRuleArg> for DfRule {
    fn from(r: DfRuleArg) -> Self {
        match r {
            DfRuleArg::NMinus2 => DfRule::NMinus2,
            DfRuleArg::NMinus4 => DfRule::NMinus4,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleSizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Also report sizes under the printed covariance expression (diagnostic).
    #[arg(long)]
    pub printed_zeta: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6,0.7")]
    pub q: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of clusters; defaults to the size from `--sizing`.
    #[arg(long)]
    pub clusters: Option<u64>,
    #[arg(long, value_enum, default_value = "z")]
    pub sizing: SizingArg,
    /// Simulate with no intervention effect.
    #[arg(long)]
    pub null: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset in `cluster_id,arm,y` CSV format.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Reference distribution of the Wald tests.
    #[arg(long, value_enum, default_value = "t")]
    pub reference: SizingArg,
    #[arg(long, value_enum, default_value = "n-2")]
    pub df_rule: DfRuleArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum, default_value = "n-2")]
    pub df_rule: DfRuleArg,
    #[arg(long, value_enum, default_value = "t")]
    pub sizing: SizingArg,
    /// Type I error run: size with the configured effect, simulate none.
    #[arg(long)]
    pub null: bool,
    /// Override the number of clusters.
    #[arg(long)]
    pub clusters: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    /// Any of table1, table2, table3-icc.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "table1,table2,table3-icc"
    )]
    pub tables: Vec<String>,
    /// Replicates per cell; 0 reports sizes only.
    #[arg(long, default_value_t = 0)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum, default_value = "n-2")]
    pub df_rule: DfRuleArg,
    #[arg(long, default_value_t = zipcrt::study::DEFAULT_ICC_CLUSTERS)]
    pub icc_clusters: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a command prints: the report for stdout and notes for stderr.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub stderr: String,
}

fn resolve_seed(seed: Option<u64>, out: &mut Output) -> u64 {
    seed.unwrap_or_else(|| {
        let generated = RandomState::new().hash_one(std::time::SystemTime::now());
        let _ = writeln!(
            out.stderr,
            "generated seed: {generated} (pass --seed {generated} to reproduce)"
        );
        generated
    })
}

fn write_artifact<T: Serialize>(
    path: &Path,
    contents: &str,
    command: &str,
    resolved: &T,
    seed: u64,
    out: &mut Output,
) -> CliResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    let manifest = RunManifest::new(command, resolved, seed)?;
    let written = manifest.write_beside(path)?;
    let _ = writeln!(
        out.stderr,
        "wrote {} and {}",
        path.display(),
        written.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    design: &'a DesignInputs,
    options: T,
}

fn load_design(path: &Path) -> CliResult<(DesignInputs, config::Resolution)> {
    ConfigFile::load(path)?.resolve()
}

pub fn cmd_samplesize(args: &SampleSizeArgs) -> CliResult<Output> {
    let (design, resolution) = load_design(&args.config)?;
    let mut out = Output::default();
    let report = &mut out.stdout;
    let (control, intervention) = (design.control(), design.intervention());
    let _ = writeln!(
        report,
        "cluster_sizes = {} (eta_m = {}, sigma2_m = {})",
        design.cluster_sizes().label(),
        design.cluster_sizes().eta_m(),
        design.cluster_sizes().sigma2_m()
    );
    match resolution.inferred_p1 {
        Some(p1) => {
            let _ = writeln!(
                report,
                "p1 = {p1:.6} (inferred from control zero proportion)"
            );
        }
        None => {
            let _ = writeln!(report, "p1 = {}", control.p());
        }
    }
    let q_note = if resolution.q_defaulted {
        " (default)"
    } else {
        ""
    };
    match design.q() {
        Some(q) => {
            let _ = writeln!(report, "q = {q}{q_note}, p2 = {:.6}", intervention.p());
        }
        None => {
            let _ = writeln!(report, "q undefined, p2 = {:.6}", intervention.p());
        }
    }
    let _ = writeln!(
        report,
        "mu1 = {:.6}, mu2 = {:.6}",
        control.mu(),
        intervention.mu()
    );
    let _ = writeln!(
        report,
        "zeta1 = {:.6}, zeta2 = {:.6}",
        pairwise_covariance_factor(control, design.rho_s(), design.rho_u()),
        pairwise_covariance_factor(intervention, design.rho_s(), design.rho_u())
    );
    let _ = writeln!(report, "sigma2_sq = {:.6}", design_variance(&design)?);
    let z = sample_size_normal(&design)?;
    let _ = writeln!(report, "N_z = {}", z.n_clusters);
    match sample_size_t(&design) {
        Ok(t) => {
            let _ = writeln!(
                report,
                "N_t = {} (df = {})",
                t.n_clusters,
                t.df.unwrap_or_default()
            );
        }
        Err(e) => {
            let _ = writeln!(report, "N_t unavailable: {e}");
        }
    }
    if args.printed_zeta {
        let printed = design_variance_with(&design, CovarianceForm::Printed)?;
        let _ = writeln!(
            report,
            "diagnostic: printed covariance form gives zeta1 = {:.6}, zeta2 = {:.6}, sigma2_sq = {printed:.6}",
            pairwise_covariance_factor_printed(control, design.rho_s(), design.rho_u()),
            pairwise_covariance_factor_printed(intervention, design.rho_s(), design.rho_u()),
        );
    }
    if let Some(path) = &args.out {
        let contents = out.stdout.clone();
        write_artifact(
            path,
            &contents,
            "samplesize",
            &Resolved {
                design: &design,
                options: (),
            },
            0,
            &mut out,
        )?;
    }
    Ok(out)
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<Output> {
    let (design, _) = load_design(&args.config)?;
    let rows = q_sweep(&design, &args.q);
    let mut out = Output::default();
    out.stdout.push_str("q,p2,n_z,n_t,error\n");
    for row in &rows {
        let line = match &row.outcome {
            Ok(point) => format!(
                "{},{:.6},{},{},",
                row.q, point.p2, point.normal.n_clusters, point.t.n_clusters
            ),
            Err(e) => format!("{},,,,\"{}\"", row.q, e.to_string().replace('"', "'")),
        };
        out.stdout.push_str(&line);
        out.stdout.push('\n');
    }
    if !rows.iter().any(|r| r.outcome.is_ok()) {
        return Err(CliError::validation(format!(
            "no q value produced a size\n{}",
            out.stdout
        )));
    }
    if let Some(path) = &args.out {
        let contents = out.stdout.clone();
        let options = Resolved {
            design: &design,
            options: SweepOptions { q: &args.q },
        };
        write_artifact(path, &contents, "sweep", &options, 0, &mut out)?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct SweepOptions<'a> {
    q: &'a [f64],
}

#[derive(Serialize)]
struct SimulateOptions {
    n_clusters: u64,
    null: bool,
    #[serde(with = "zipcrt::manifest::seed_text")]
    seed: u64,
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<Output> {
    let (design, _) = load_design(&args.config)?;
    let mut out = Output::default();
    let seed = resolve_seed(args.seed, &mut out);
    let n = match args.clusters {
        Some(n) => n,
        None => match args.sizing {
            SizingArg::Z => sample_size_normal(&design)?.n_clusters,
            SizingArg::T => sample_size_t(&design)?.n_clusters,
        },
    };
    let simulated = if args.null {
        design.null_counterpart()
    } else {
        design
    };
    let data = generate_trial(&simulated, n as usize, seed)?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    let contents = String::from_utf8(buf).map_err(|e| CliError::runtime(e.to_string()))?;
    let options = SimulateOptions {
        n_clusters: n,
        null: args.null,
        seed,
    };
    write_artifact(
        &args.out,
        &contents,
        "simulate",
        &Resolved {
            design: &design,
            options,
        },
        seed,
        &mut out,
    )?;
    let _ = writeln!(
        out.stdout,
        "clusters = {}, subjects = {}, seed = {seed}",
        data.n_clusters(),
        data.n_subjects()
    );
    Ok(out)
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<Output> {
    let file = std::fs::File::open(&args.data).map_err(|e| {
        CliError::validation(format!("cannot open dataset {}: {e}", args.data.display()))
    })?;
    let data = TrialDataset::read_csv(file)?;
    let fit = fit_gee(&data)?;
    let n = fit.n_clusters as u64;
    let reference = match args.reference {
        SizingArg::Z => TestReference::Normal,
        SizingArg::T => TestReference::StudentT {
            df: DfRule::from(args.df_rule).df(n)?,
        },
    };
    let mut out = Output::default();
    let report = &mut out.stdout;
    let _ = writeln!(
        report,
        "# clusters = {}, subjects = {}, converged = {}, iterations = {}{}",
        data.n_clusters(),
        data.n_subjects(),
        fit.converged,
        fit.iterations,
        if fit.degenerate {
            ", structural-zero probability on boundary"
        } else {
            ""
        }
    );
    report.push_str(&fit.summary_table());
    report.push_str("test,statistic,reference,critical_value,reject\n");
    let reference_name = match reference {
        TestReference::Normal => "z".to_string(),
        TestReference::StudentT { df } => format!("t{df}"),
    };
    for (name, test) in [
        ("naive", fit.wald_naive(reference, args.alpha)?),
        ("jackknife", fit.wald_jackknife(reference, args.alpha)?),
    ] {
        let _ = writeln!(
            report,
            "{name},{},{reference_name},{},{}",
            test.statistic, test.critical_value, test.reject
        );
    }
    if let Some(path) = &args.out {
        let contents = out.stdout.clone();
        let options = FitOptions {
            data: args.data.display().to_string(),
            alpha: args.alpha,
            reference: reference_name,
        };
        write_artifact(path, &contents, "fit", &options, 0, &mut out)?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct FitOptions {
    data: String,
    alpha: f64,
    reference: String,
}

#[derive(Serialize)]
struct StudyOptions {
    replications: usize,
    sizing: Sizing,
    df_rule: DfRule,
    null: bool,
    n_clusters: Option<u64>,
    #[serde(with = "zipcrt::manifest::seed_text")]
    seed: u64,
}

pub fn cmd_study(args: &StudyArgs) -> CliResult<Output> {
    let (design, _) = load_design(&args.config)?;
    let mut out = Output::default();
    let seed = resolve_seed(args.seed, &mut out);
    let mut config = StudyConfig::new(design, args.reps, args.sizing.into(), seed);
    config.test_df_rule = args.df_rule.into();
    config.null_hypothesis = args.null;
    config.workers = args.workers;
    config.n_clusters = args.clusters;
    let report = run_power_study(&config)?;
    out.stdout = report.to_csv();
    if let Some(path) = &args.out {
        let contents = out.stdout.clone();
        let options = StudyOptions {
            replications: args.reps,
            sizing: config.sizing,
            df_rule: config.test_df_rule,
            null: args.null,
            n_clusters: args.clusters,
            seed,
        };
        write_artifact(
            path,
            &contents,
            "study",
            &Resolved {
                design: &design,
                options,
            },
            seed,
            &mut out,
        )?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct TablesOptions<'a> {
    tables: &'a [String],
    replications: usize,
    df_rule: DfRule,
    icc_clusters: usize,
    #[serde(with = "zipcrt::manifest::seed_text")]
    seed: u64,
}

pub fn cmd_tables(args: &TablesArgs) -> CliResult<Output> {
    let selection = args
        .tables
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<TableId>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Output::default();
    let seed = resolve_seed(args.seed, &mut out);
    let opts = TableOptions {
        replications: args.reps,
        seed,
        workers: args.workers,
        test_df_rule: args.df_rule.into(),
        icc_clusters: args.icc_clusters,
    };
    out.stdout = reproduce_tables(&selection, &opts)?;
    if let Some(path) = &args.out {
        let contents = out.stdout.clone();
        let options = TablesOptions {
            tables: &args.tables,
            replications: args.reps,
            df_rule: opts.test_df_rule,
            icc_clusters: args.icc_clusters,
            seed,
        };
        write_artifact(path, &contents, "tables", &options, seed, &mut out)?;
    }
    Ok(out)
}

pub fn run(cli: &Cli) -> CliResult<Output> {
    match &cli.command {
        Command::Samplesize(a) => cmd_samplesize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Study(a) => cmd_study(a),
        Command::Tables(a) => cmd_tables(a),
    }
}
