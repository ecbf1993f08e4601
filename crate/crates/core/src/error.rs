use thiserror::Error;

/// Errors produced by design, simulation and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter combination falls outside the admissible region.
    #[error("domain error: {0}")]
    Domain(String),

    /// No structural-zero probability reproduces the observed zero proportion.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("intervention effect beta2 is zero; sample size is undefined")]
    UndefinedEffect,

    #[error("allocation probability r_bar = {0} leaves an arm empty")]
    DegenerateAllocation(f64),

    #[error("insufficient clusters: {0}")]
    InsufficientClusters(String),

    /// Simulation or study configuration that cannot be honoured.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// The estimating equations have no finite solution for this data.
    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("did not converge after {iterations} iterations: {context}")]
    NonConvergence { iterations: usize, context: String },

    #[error("{failed} of {total} replicates failed ({:.2}%, cap 1%); first failure: {first}", .fraction * 100.0)]
    StudyFailures {
        failed: usize,
        total: usize,
        fraction: f64,
        first: String,
    },

    #[error("unknown table identifier `{0}` (expected table1, table2 or table3-icc)")]
    UnknownTable(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("manifest serialization: {0}")]
    Manifest(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
