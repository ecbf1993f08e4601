//! Monte Carlo studies: empirical type I error and power, the Poisson ICC
//! comparison, and regeneration of the simulation tables.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{ClusterSizeModel, DesignInputs, DesignParams, ZeroEffect};
use crate::error::{Error, Result};
use crate::gee::{fit_gee_summaries, summarize, TestReference};
use crate::power::{sample_size_normal, sample_size_t};
use crate::rng::child_seed;
use crate::simulate::generate_trial;

/// Largest tolerated fraction of failed replicates.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;
pub const DEFAULT_ICC_CLUSTERS: usize = 10_000;

/// Which closed form fixes the number of clusters (and the test reference).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sizing {
    /// `N_z` with normal critical values.
    Z,
    /// `N_t` with Student-t critical values.
    T,
}

impl FromStr for Sizing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Sizing::Z),
            "t" => Ok(Sizing::T),
            other => Err(Error::Configuration(format!(
                "sizing must be z or t, got {other:?}"
            ))),
        }
    }
}

/// Degrees of freedom of the t reference used when testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DfRule {
    #[default]
    #[serde(rename = "n-2")]
    NMinus2,
    #[serde(rename = "n-4")]
    NMinus4,
}

impl DfRule {
    pub fn df(self, n_clusters: u64) -> Result<u32> {
        let lost = match self {
            DfRule::NMinus2 => 2,
            DfRule::NMinus4 => 4,
        };
        if n_clusters <= lost {
            return Err(Error::InsufficientClusters(format!(
                "{n_clusters} clusters leave no degrees of freedom under {self}"
            )));
        }
        Ok((n_clusters - lost) as u32)
    }
}

impl std::fmt::Display for DfRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DfRule::NMinus2 => "n-2",
            DfRule::NMinus4 => "n-4",
        })
    }
}

impl FromStr for DfRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n-2" => Ok(DfRule::NMinus2),
            "n-4" => Ok(DfRule::NMinus4),
            other => Err(Error::Configuration(format!(
                "df rule must be n-2 or n-4, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Design under the alternative; its `beta2` sizes the trial.
    pub design: DesignInputs,
    pub replications: usize,
    pub sizing: Sizing,
    pub test_df_rule: DfRule,
    pub seed: u64,
    /// Simulate with `beta2 = 0` (sizing still uses the design's `beta2`).
    pub null_hypothesis: bool,
    /// Bound on concurrent replicates; `None` uses every core.
    pub workers: Option<usize>,
    /// Fixed cluster count instead of the sizing formula.
    pub n_clusters: Option<u64>,
}

impl StudyConfig {
    pub fn new(design: DesignInputs, replications: usize, sizing: Sizing, seed: u64) -> Self {
        Self {
            design,
            replications,
            sizing,
            test_df_rule: DfRule::default(),
            seed,
            null_hypothesis: false,
            workers: None,
            n_clusters: None,
        }
    }

    /// Cluster count and the reference distribution for the Wald tests.
    pub fn resolve(&self) -> Result<(u64, TestReference)> {
        let n = match (self.n_clusters, self.sizing) {
            (Some(n), _) => n,
            (None, Sizing::Z) => sample_size_normal(&self.design)?.n_clusters,
            (None, Sizing::T) => sample_size_t(&self.design)?.n_clusters,
        };
        let reference = match self.sizing {
            Sizing::Z => TestReference::Normal,
            Sizing::T => TestReference::StudentT {
                df: self.test_df_rule.df(n)?,
            },
        };
        Ok((n, reference))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub n_clusters_used: u64,
    pub replications: usize,
    pub rejection_rate_naive: f64,
    pub rejection_rate_jackknife: f64,
    pub mc_standard_error_naive: f64,
    pub mc_standard_error_jackknife: f64,
    pub replicate_failures: usize,
}

impl StudyReport {
    pub const CSV_HEADER: &'static str = "n_clusters,replications,rejection_rate_naive,mc_se_naive,rejection_rate_jackknife,mc_se_jackknife,replicate_failures";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.n_clusters_used,
            self.replications,
            self.rejection_rate_naive,
            self.mc_standard_error_naive,
            self.rejection_rate_jackknife,
            self.mc_standard_error_jackknife,
            self.replicate_failures
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Monte Carlo standard error of a rejection rate over `l` replicates.
pub fn mc_standard_error(rate: f64, l: usize) -> f64 {
    if l == 0 {
        return 0.0;
    }
    (rate * (1.0 - rate) / l as f64).sqrt()
}

type ReplicateOutcome = std::result::Result<(bool, bool), String>;

fn run_replicate(
    design: &DesignInputs,
    n: u64,
    seed: u64,
    reference: TestReference,
) -> ReplicateOutcome {
    let data = generate_trial(design, n as usize, seed).map_err(|e| e.to_string())?;
    let fit = fit_gee_summaries(&summarize(&data)).map_err(|e| e.to_string())?;
    if !fit.converged {
        return Err(format!(
            "no convergence after {} iterations",
            fit.iterations
        ));
    }
    if fit.degenerate {
        return Err("structural-zero probability on the boundary".into());
    }
    let alpha = design.alpha();
    let naive = fit
        .wald_naive(reference, alpha)
        .map_err(|e| e.to_string())?;
    let jack = fit
        .wald_jackknife(reference, alpha)
        .map_err(|e| e.to_string())?;
    Ok((naive.reject, jack.reject))
}

fn in_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(0) => Err(Error::Configuration("workers must be at least 1".into())),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Sizes the trial, simulates `replications` datasets, fits each and applies
/// the naive and jackknife Wald tests.
pub fn run_power_study(config: &StudyConfig) -> Result<StudyReport> {
    if config.replications == 0 {
        return Err(Error::Configuration(
            "replications must be at least 1".into(),
        ));
    }
    let (n, reference) = config.resolve()?;
    let simulated = if config.null_hypothesis {
        config.design.null_counterpart()
    } else {
        config.design
    };
    let outcomes: Vec<ReplicateOutcome> = in_pool(config.workers, || {
        (0..config.replications as u64)
            .into_par_iter()
            .map(|l| run_replicate(&simulated, n, child_seed(config.seed, l), reference))
            .collect()
    })?;

    let total = outcomes.len();
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    let fraction = failed as f64 / total as f64;
    if fraction >= MAX_FAILURE_FRACTION {
        let first = outcomes
            .iter()
            .enumerate()
            .find_map(|(i, o)| o.as_ref().err().map(|e| format!("replicate {i}: {e}")))
            .unwrap_or_default();
        return Err(Error::StudyFailures {
            failed,
            total,
            fraction,
            first,
        });
    }
    let ok: Vec<(bool, bool)> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let used = ok.len();
    let rate = |pick: fn(&(bool, bool)) -> bool| {
        ok.iter().filter(|o| pick(o)).count() as f64 / used as f64
    };
    let naive = rate(|o| o.0);
    let jack = rate(|o| o.1);
    Ok(StudyReport {
        n_clusters_used: n,
        replications: config.replications,
        rejection_rate_naive: naive,
        rejection_rate_jackknife: jack,
        mc_standard_error_naive: mc_standard_error(naive, used),
        mc_standard_error_jackknife: mc_standard_error(jack, used),
        replicate_failures: failed,
    })
}

/// ICC a Poisson working model would report for ZIP data: pooled pairwise
/// products of Pearson residuals over the mean squared residual.
pub fn estimate_poisson_icc(design: &DesignInputs, n_clusters: usize, seed: u64) -> Result<f64> {
    let data = generate_trial(design, n_clusters, seed)?;
    let mut sums = [0.0; 2];
    let mut counts = [0.0; 2];
    for c in data.clusters() {
        sums[c.arm as usize] += c.outcomes.iter().map(|&y| y as f64).sum::<f64>();
        counts[c.arm as usize] += c.outcomes.len() as f64;
    }
    let means = [sums[0] / counts[0], sums[1] / counts[1]];
    if means.iter().any(|&m| m.is_nan() || m <= 0.0) {
        return Err(Error::Estimation("an arm has a zero sample mean".into()));
    }
    let mut cross = 0.0;
    let mut pairs = 0.0;
    let mut squares = 0.0;
    for c in data.clusters() {
        let mu = means[c.arm as usize];
        let scale = mu.sqrt();
        let (mut s, mut ss) = (0.0, 0.0);
        for &y in &c.outcomes {
            let e = (y as f64 - mu) / scale;
            s += e;
            ss += e * e;
        }
        let m = c.outcomes.len() as f64;
        cross += (s * s - ss) / 2.0;
        pairs += m * (m - 1.0) / 2.0;
        squares += ss;
    }
    if pairs == 0.0 {
        return Err(Error::Estimation("no within-cluster pairs".into()));
    }
    let phi = squares / data.n_subjects() as f64;
    Ok(cross / pairs / phi)
}

/// Simulation tables that can be regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableId {
    /// `N_z` with normal-reference operating characteristics.
    Table1,
    /// `N_t` with t-reference operating characteristics.
    Table2,
    /// Poisson working-model ICC next to `N_z`.
    Table3Icc,
}

impl FromStr for TableId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(TableId::Table1),
            "table2" => Ok(TableId::Table2),
            "table3-icc" => Ok(TableId::Table3Icc),
            other => Err(Error::UnknownTable(other.to_string())),
        }
    }
}

impl TableId {
    pub fn name(self) -> &'static str {
        match self {
            TableId::Table1 => "table1",
            TableId::Table2 => "table2",
            TableId::Table3Icc => "table3-icc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableOptions {
    /// Monte Carlo replicates per cell; 0 prints sizes only.
    pub replications: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    pub test_df_rule: DfRule,
    pub icc_clusters: usize,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            replications: 0,
            seed: 0,
            workers: None,
            test_df_rule: DfRule::default(),
            icc_clusters: DEFAULT_ICC_CLUSTERS,
        }
    }
}

pub const TABLE_Q_VALUES: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const TABLE_RHO_VALUES: [f64; 2] = [0.03, 0.05];

/// Cluster-size distributions of the operating-characteristic tables.
pub fn table_distributions() -> Vec<ClusterSizeModel> {
    vec![
        ClusterSizeModel::truncated_poisson(45.0, 20, 70).expect("valid support"),
        ClusterSizeModel::discrete_uniform(34, 56).expect("valid support"),
        ClusterSizeModel::discrete_uniform(10, 80).expect("valid support"),
    ]
}

/// Design of one table cell: control mean 1 with half structural zeros,
/// `beta2 = -0.431`, 1:1 allocation, alpha 0.05 and power 0.8.
pub fn table_design(sizes: ClusterSizeModel, rho: f64, q: f64) -> Result<DesignInputs> {
    DesignInputs::new(DesignParams {
        beta1: 0.0,
        beta2: -0.431,
        p1: 0.5,
        zero_effect: ZeroEffect::Q(q),
        rho_s: rho,
        rho_u: rho,
        r_bar: 0.5,
        cluster_sizes: sizes,
        alpha: 0.05,
        power: 0.8,
    })
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("writing to memory");
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("utf-8 fields")
}

fn fmt_rate(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn cell_seed(seed: u64, cell: u64, null: bool) -> u64 {
    child_seed(child_seed(seed, cell), null as u64)
}

fn operating_rows(table: TableId, opts: &TableOptions, out: &mut String) -> Result<()> {
    let sizing = if table == TableId::Table1 {
        Sizing::Z
    } else {
        Sizing::T
    };
    let mut cell = 0u64;
    for sizes in table_distributions() {
        for rho in TABLE_RHO_VALUES {
            for q in TABLE_Q_VALUES {
                cell += 1;
                let design = table_design(sizes, rho, q)?;
                let mut config = StudyConfig::new(design, opts.replications.max(1), sizing, 0);
                config.test_df_rule = opts.test_df_rule;
                config.workers = opts.workers;
                let (n, _) = config.resolve()?;
                let (mut null, mut alt) = (None, None);
                if opts.replications > 0 {
                    config.null_hypothesis = true;
                    config.seed = cell_seed(opts.seed, cell, true);
                    null = Some(run_power_study(&config)?);
                    config.null_hypothesis = false;
                    config.seed = cell_seed(opts.seed, cell, false);
                    alt = Some(run_power_study(&config)?);
                }
                let pick = |r: &Option<StudyReport>, f: fn(&StudyReport) -> f64| {
                    fmt_rate(r.as_ref().map(f))
                };
                out.push_str(&csv_line(&[
                    table.name().to_string(),
                    sizes.label(),
                    rho.to_string(),
                    rho.to_string(),
                    q.to_string(),
                    n.to_string(),
                    pick(&null, |r| r.rejection_rate_naive),
                    pick(&alt, |r| r.rejection_rate_naive),
                    pick(&null, |r| r.rejection_rate_jackknife),
                    pick(&alt, |r| r.rejection_rate_jackknife),
                    pick(&null, |r| r.mc_standard_error_naive),
                    pick(&alt, |r| r.mc_standard_error_naive),
                    pick(&null, |r| r.mc_standard_error_jackknife),
                    pick(&alt, |r| r.mc_standard_error_jackknife),
                ]));
            }
        }
    }
    Ok(())
}

fn icc_rows(opts: &TableOptions, out: &mut String) -> Result<()> {
    let sizes = [
        ClusterSizeModel::discrete_uniform(34, 56)?,
        ClusterSizeModel::discrete_uniform(10, 80)?,
    ];
    let mut cell = 0u64;
    for sizes in sizes {
        for rho in TABLE_RHO_VALUES {
            for q in TABLE_Q_VALUES {
                cell += 1;
                let design = table_design(sizes, rho, q)?;
                let n = sample_size_normal(&design)?.n_clusters;
                let icc = estimate_poisson_icc(
                    &design,
                    opts.icc_clusters,
                    cell_seed(opts.seed, cell, false),
                )?;
                out.push_str(&csv_line(&[
                    TableId::Table3Icc.name().to_string(),
                    sizes.label(),
                    rho.to_string(),
                    rho.to_string(),
                    q.to_string(),
                    n.to_string(),
                    format!("{icc:.4}"),
                ]));
            }
        }
    }
    Ok(())
}

pub const OPERATING_HEADER: &str = "table,distribution,rho_s,rho_u,q,n_clusters,type1_naive,power_naive,type1_jackknife,power_jackknife,type1_naive_se,power_naive_se,type1_jackknife_se,power_jackknife_se";
pub const ICC_HEADER: &str = "table,distribution,rho_s,rho_u,q,n_clusters,rho_hat_poisson";

/// Regenerates the selected tables as comma-separated blocks, each with its
/// own header. An empty selection yields an empty report.
pub fn reproduce_tables(selection: &[TableId], opts: &TableOptions) -> Result<String> {
    let mut out = String::new();
    for &table in selection {
        match table {
            TableId::Table1 | TableId::Table2 => {
                out.push_str(OPERATING_HEADER);
                out.push('\n');
                operating_rows(table, opts, &mut out)?;
            }
            TableId::Table3Icc => {
                out.push_str(ICC_HEADER);
                out.push('\n');
                icc_rows(opts, &mut out)?;
            }
        }
    }
    Ok(out)
}
