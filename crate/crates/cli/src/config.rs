//! Flat TOML design configuration.
//!
//! ```toml
//! beta1 = 0.0
//! beta2 = -0.431
//! p1 = 0.5
//! q = 0.5              # or p2 = ...; q defaults to 0.5
//! rho_s = 0.03
//! rho_u = 0.03
//! r_bar = 0.5
//! alpha = 0.05
//! power = 0.8
//! cluster_dist = "discrete_uniform"   # truncated_poisson | fixed
//! cluster_lo = 34
//! cluster_hi = 56
//! ```
//!
//! `control_mean` and `control_zero_proportion` may replace `beta1` and `p1`;
//! `p1` is then inferred from the zero proportion.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zipcrt::design::{
    infer_p1_with, p2_from_q, ClusterSizeKind, ClusterSizeModel, DesignInputs, DesignParams,
    ZeroEffect, ZeroProbabilityForm,
};

use crate::CliError;

const DEFAULT_Q: f64 = 0.5;
const CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub p1: Option<f64>,
    pub q: Option<f64>,
    pub p2: Option<f64>,
    pub control_mean: Option<f64>,
    pub control_zero_proportion: Option<f64>,
    /// "mixture" (default) or "printed".
    pub zero_formula: Option<String>,
    pub rho_s: Option<f64>,
    pub rho_u: Option<f64>,
    pub r_bar: Option<f64>,
    pub alpha: Option<f64>,
    pub power: Option<f64>,
    pub cluster_dist: Option<String>,
    pub cluster_lo: Option<u32>,
    pub cluster_hi: Option<u32>,
    pub cluster_rate: Option<f64>,
    pub cluster_m: Option<u32>,
}

/// How the zero-inflation inputs were resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolution {
    pub inferred_p1: Option<f64>,
    pub q_defaulted: bool,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("invalid config: {e}")))
    }

    fn cluster_sizes(&self) -> Result<ClusterSizeModel, CliError> {
        let dist = self.cluster_dist.as_deref().unwrap_or("discrete_uniform");
        let need = |name: &str, v: Option<u32>| {
            v.ok_or_else(|| CliError::validation(format!("cluster_dist = \"{dist}\" needs {name}")))
        };
        let kind = match dist {
            "discrete_uniform" => ClusterSizeKind::DiscreteUniform {
                lo: need("cluster_lo", self.cluster_lo)?,
                hi: need("cluster_hi", self.cluster_hi)?,
            },
            "truncated_poisson" => ClusterSizeKind::TruncatedPoisson {
                rate: self.cluster_rate.ok_or_else(|| {
                    CliError::validation("cluster_dist = \"truncated_poisson\" needs cluster_rate")
                })?,
                lo: need("cluster_lo", self.cluster_lo)?,
                hi: need("cluster_hi", self.cluster_hi)?,
            },
            "fixed" => ClusterSizeKind::Fixed {
                m: need("cluster_m", self.cluster_m)?,
            },
            other => {
                return Err(CliError::validation(format!(
                "cluster_dist must be discrete_uniform, truncated_poisson or fixed, got {other:?}"
            )))
            }
        };
        Ok(ClusterSizeModel::new(kind)?)
    }

    fn zero_formula(&self) -> Result<ZeroProbabilityForm, CliError> {
        match self.zero_formula.as_deref().unwrap_or("mixture") {
            "mixture" => Ok(ZeroProbabilityForm::Mixture),
            "printed" => Ok(ZeroProbabilityForm::Printed),
            other => Err(CliError::validation(format!(
                "zero_formula must be mixture or printed, got {other:?}"
            ))),
        }
    }

    fn control_arm(&self) -> Result<(f64, f64, Option<f64>), CliError> {
        let observed = (self.control_mean, self.control_zero_proportion);
        match observed {
            (None, None) => {
                let mut missing = Vec::new();
                if self.beta1.is_none() {
                    missing.push("beta1 (or control_mean)");
                }
                if self.p1.is_none() {
                    missing.push("p1 (or control_zero_proportion)");
                }
                if !missing.is_empty() {
                    return Err(CliError::validation(format!(
                        "missing {}",
                        missing.join(", ")
                    )));
                }
                Ok((
                    self.beta1.unwrap_or_default(),
                    self.p1.unwrap_or_default(),
                    None,
                ))
            }
            (Some(mean), zero_share) => {
                if mean.is_nan() || mean <= 0.0 {
                    return Err(CliError::validation(format!(
                        "control_mean = {mean} must be positive"
                    )));
                }
                let beta1 = mean.ln();
                if let Some(b) = self.beta1 {
                    if (b - beta1).abs() > CONSISTENCY_TOL {
                        return Err(CliError::validation(format!(
                            "beta1 = {b} contradicts control_mean = {mean} (log = {beta1})"
                        )));
                    }
                }
                match (zero_share, self.p1) {
                    (Some(_), Some(_)) => Err(CliError::validation(
                        "give either p1 or control_zero_proportion, not both",
                    )),
                    (Some(z), None) => {
                        let p1 = infer_p1_with(mean, z, self.zero_formula()?)?;
                        Ok((beta1, p1, Some(p1)))
                    }
                    (None, Some(p1)) => Ok((beta1, p1, None)),
                    (None, None) => Err(CliError::validation(
                        "missing p1 (or control_zero_proportion)",
                    )),
                }
            }
            (None, Some(_)) => Err(CliError::validation(
                "control_zero_proportion requires control_mean",
            )),
        }
    }

    /// Validated design plus a record of defaults and inferred values.
    pub fn resolve(&self) -> Result<(DesignInputs, Resolution), CliError> {
        let (beta1, p1, inferred_p1) = self.control_arm()?;
        let beta2 = self
            .beta2
            .ok_or_else(|| CliError::validation("missing beta2"))?;
        let mut missing = Vec::new();
        if self.rho_s.is_none() {
            missing.push("rho_s");
        }
        if self.rho_u.is_none() {
            missing.push("rho_u");
        }
        if !missing.is_empty() {
            return Err(CliError::validation(format!(
                "missing {}",
                missing.join(", ")
            )));
        }
        let (zero_effect, q_defaulted) = match (self.q, self.p2) {
            (Some(q), Some(p2)) => {
                let implied = p2_from_q(p1, beta2, q)?;
                if (implied - p2).abs() > CONSISTENCY_TOL {
                    return Err(CliError::validation(format!(
                        "q = {q} and p2 = {p2} disagree: q implies p2 = {implied} (fields: p1, beta2, q, p2)"
                    )));
                }
                (ZeroEffect::Q(q), false)
            }
            (Some(q), None) => (ZeroEffect::Q(q), false),
            (None, Some(p2)) => (ZeroEffect::P2(p2), false),
            (None, None) => (ZeroEffect::Q(DEFAULT_Q), true),
        };
        let design = DesignInputs::new(DesignParams {
            beta1,
            beta2,
            p1,
            zero_effect,
            rho_s: self.rho_s.unwrap_or_default(),
            rho_u: self.rho_u.unwrap_or_default(),
            r_bar: self.r_bar.unwrap_or(0.5),
            cluster_sizes: self.cluster_sizes()?,
            alpha: self.alpha.unwrap_or(0.05),
            power: self.power.unwrap_or(0.8),
        })?;
        Ok((
            design,
            Resolution {
                inferred_p1,
                q_defaulted,
            },
        ))
    }
}
