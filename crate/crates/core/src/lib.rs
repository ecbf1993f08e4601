//! Sample size, simulation and GEE analysis for cluster randomized trials
//! with zero-inflated count outcomes.

pub mod design;
pub mod error;
pub mod gee;
pub mod manifest;
pub mod power;
pub mod quantile;
pub mod rng;
pub mod simulate;
pub mod study;

pub use design::{
    ArmProfile, ClusterSizeKind, ClusterSizeModel, DesignInputs, DesignParams, ZeroEffect,
};
pub use error::{Error, Result};
pub use gee::{fit_gee, GeeFit, TestReference, WaldTest};
pub use power::{design_variance, sample_size_normal, sample_size_t, SampleSizeResult};
pub use simulate::{generate_trial, TrialDataset};
pub use study::{run_power_study, StudyConfig, StudyReport};
