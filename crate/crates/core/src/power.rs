//! Asymptotic design variance and required numbers of clusters.

use serde::{Deserialize, Serialize};

use crate::design::{
    pairwise_covariance_factor, pairwise_covariance_factor_printed, ArmProfile, DesignInputs,
};
use crate::error::{Error, Result};
use crate::quantile::{normal_quantile, t_quantile};

/// Critical values used when sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticalBasis {
    Normal,
    StudentT,
}

/// Which closed form supplies the within-cluster covariance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovarianceForm {
    /// Derived by enumerating structural-zero pairs. Always used for sizing.
    #[default]
    Enumerated,
    /// The inconsistent printed expression; diagnostics only.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeResult {
    /// Asymptotic variance of `sqrt(N) * beta2_hat`.
    pub sigma2_sq: f64,
    pub n_raw: f64,
    pub n_clusters: u64,
    /// Degrees of freedom of the t quantiles; `None` for normal sizing.
    pub df: Option<u32>,
    pub critical_basis: CriticalBasis,
}

fn arm_term(arm: &ArmProfile, share: f64, eta: f64, pair_moment: f64, zeta: f64) -> f64 {
    let mu = arm.mu();
    (eta * mu * (1.0 + arm.zero_odds() * mu) + pair_moment * zeta) / (share * mu * mu * eta * eta)
}

/// `sigma_2^2`, the (2,2) element of `A^{-1} V A^{-1}`.
pub fn design_variance(design: &DesignInputs) -> Result<f64> {
    design_variance_with(design, CovarianceForm::Enumerated)
}

pub fn design_variance_with(design: &DesignInputs, form: CovarianceForm) -> Result<f64> {
    let r_bar = design.r_bar();
    if !(r_bar > 0.0 && r_bar < 1.0) {
        return Err(Error::DegenerateAllocation(r_bar));
    }
    let sizes = design.cluster_sizes();
    let (eta, pairs) = (sizes.eta_m(), sizes.pair_moment());
    let zeta = |arm: &ArmProfile| match form {
        CovarianceForm::Enumerated => {
            pairwise_covariance_factor(arm, design.rho_s(), design.rho_u())
        }
        CovarianceForm::Printed => {
            pairwise_covariance_factor_printed(arm, design.rho_s(), design.rho_u())
        }
    };
    let control = design.control();
    let intervention = design.intervention();
    Ok(arm_term(control, 1.0 - r_bar, eta, pairs, zeta(control))
        + arm_term(intervention, r_bar, eta, pairs, zeta(intervention)))
}

fn effect_squared(design: &DesignInputs) -> Result<f64> {
    let beta2 = design.beta2();
    if beta2 == 0.0 {
        return Err(Error::UndefinedEffect);
    }
    Ok(beta2 * beta2)
}

fn raw_size(sigma2_sq: f64, critical_sum: f64, effect2: f64) -> f64 {
    sigma2_sq * critical_sum * critical_sum / effect2
}

/// `N = sigma_2^2 (z_{1-alpha/2} + z_{1-gamma})^2 / beta2^2`.
pub fn sample_size_normal(design: &DesignInputs) -> Result<SampleSizeResult> {
    let effect2 = effect_squared(design)?;
    let sigma2_sq = design_variance(design)?;
    let crit = normal_quantile(1.0 - design.alpha() / 2.0)? + normal_quantile(design.power())?;
    let n_raw = raw_size(sigma2_sq, crit, effect2);
    Ok(SampleSizeResult {
        sigma2_sq,
        n_raw,
        n_clusters: n_raw.ceil() as u64,
        df: None,
        critical_basis: CriticalBasis::Normal,
    })
}

/// Two-step t sizing: the normal-based count `N_z` fixes `df = ceil(N_z) - 2`,
/// then t quantiles at that df replace the normal ones.
pub fn sample_size_t(design: &DesignInputs) -> Result<SampleSizeResult> {
    let normal = sample_size_normal(design)?;
    let df = normal.n_clusters as i64 - 2;
    if df <= 0 {
        return Err(Error::InsufficientClusters(format!(
            "normal-based size {} leaves {df} degrees of freedom",
            normal.n_clusters
        )));
    }
    let df = df as u32;
    let crit = t_quantile(1.0 - design.alpha() / 2.0, df)? + t_quantile(design.power(), df)?;
    let n_raw = raw_size(normal.sigma2_sq, crit, effect_squared(design)?);
    Ok(SampleSizeResult {
        sigma2_sq: normal.sigma2_sq,
        n_raw,
        n_clusters: n_raw.ceil() as u64,
        df: Some(df),
        critical_basis: CriticalBasis::StudentT,
    })
}

/// One entry of a sensitivity sweep over `q`.
#[derive(Debug)]
pub struct SweepRow {
    pub q: f64,
    /// Intervention-arm design and both sizes, or the reason `q` is infeasible.
    pub outcome: Result<SweepPoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub p2: f64,
    pub normal: SampleSizeResult,
    pub t: SampleSizeResult,
}

/// Recomputes both arms for every `q` with `beta2` held fixed. A failing
/// entry does not abort the sweep.
pub fn q_sweep(template: &DesignInputs, q_values: &[f64]) -> Vec<SweepRow> {
    q_values
        .iter()
        .map(|&q| SweepRow {
            q,
            outcome: template.with_q(q).and_then(|design| {
                Ok(SweepPoint {
                    p2: design.intervention().p(),
                    normal: sample_size_normal(&design)?,
                    t: sample_size_t(&design)?,
                })
            }),
        })
        .collect()
}
