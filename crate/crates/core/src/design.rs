//! Marginalized zero-inflated Poisson model and the scalar design math shared
//! by the power engine, the simulator and the estimator.
//!
//! An outcome is a mixture of a point mass at zero (probability `p`, the
//! structural zero) and a Poisson(`lambda`) count, so the marginal mean is
//! `mu = (1 - p) * lambda`. Designs are parameterized on the log marginal
//! mean: `beta1 = log mu_control`, `beta2 = log mu_intervention - beta1`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const PROFILE_TOL: f64 = 1e-12;
const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITER: usize = 200;
const BISECTION_UPPER: f64 = 1.0 - 1e-9;

/// `p / (1 - p)`, taken as exactly zero when `p == 0`.
pub(crate) fn zero_odds(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p / (1.0 - p)
    }
}

/// Per-arm ZIP parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmProfile {
    mu: f64,
    p: f64,
    lambda: f64,
}

impl ArmProfile {
    /// Builds a profile from the marginal mean and structural-zero probability.
    pub fn new(mu: f64, p: f64) -> Result<Self> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::Domain(format!(
                "marginal mean mu = {mu} must be positive"
            )));
        }
        check_zero_probability("p", p)?;
        Ok(Self {
            mu,
            p,
            lambda: mu / (1.0 - p),
        })
    }

    /// Builds a profile from the Poisson-component mean.
    pub fn from_lambda(lambda: f64, p: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Domain(format!(
                "Poisson mean lambda = {lambda} must be positive"
            )));
        }
        check_zero_probability("p", p)?;
        let profile = Self {
            mu: (1.0 - p) * lambda,
            p,
            lambda,
        };
        debug_assert!((profile.mu - (1.0 - p) * profile.lambda).abs() <= PROFILE_TOL * lambda);
        Ok(profile)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `p / (1 - p)`, the overdispersion coefficient of the marginal variance.
    pub fn zero_odds(&self) -> f64 {
        zero_odds(self.p)
    }
}

fn check_zero_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("{name} = {p} must lie in [0, 1)")));
    }
    Ok(())
}

fn check_icc(name: &str, rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Domain(format!("{name} = {rho} must lie in [0, 1)")));
    }
    Ok(())
}

fn check_open_unit(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("{name} = {x} must lie in (0, 1)")));
    }
    Ok(())
}

/// Cluster-size distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClusterSizeKind {
    /// Uniform on the integers `lo..=hi`.
    DiscreteUniform {
        lo: u32,
        hi: u32,
    },
    /// Poisson(`rate`) restricted to `lo..=hi`.
    TruncatedPoisson {
        rate: f64,
        lo: u32,
        hi: u32,
    },
    Fixed {
        m: u32,
    },
}

/// Distribution of cluster sizes together with its exact first two moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSizeModel {
    kind: ClusterSizeKind,
    eta_m: f64,
    sigma2_m: f64,
}

impl ClusterSizeModel {
    pub fn discrete_uniform(lo: u32, hi: u32) -> Result<Self> {
        Self::new(ClusterSizeKind::DiscreteUniform { lo, hi })
    }

    pub fn truncated_poisson(rate: f64, lo: u32, hi: u32) -> Result<Self> {
        Self::new(ClusterSizeKind::TruncatedPoisson { rate, lo, hi })
    }

    pub fn fixed(m: u32) -> Result<Self> {
        Self::new(ClusterSizeKind::Fixed { m })
    }

    pub fn new(kind: ClusterSizeKind) -> Result<Self> {
        let (eta_m, sigma2_m) = match kind {
            ClusterSizeKind::DiscreteUniform { lo, hi } => {
                check_support(lo, hi)?;
                let (a, b) = (lo as f64, hi as f64);
                let width = b - a + 1.0;
                ((a + b) / 2.0, (width * width - 1.0) / 12.0)
            }
            ClusterSizeKind::TruncatedPoisson { rate, lo, hi } => {
                check_support(lo, hi)?;
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(Error::Domain(format!(
                        "truncated Poisson rate = {rate} must be positive"
                    )));
                }
                truncated_poisson_moments(rate, lo, hi)?
            }
            ClusterSizeKind::Fixed { m } => {
                if m < 1 {
                    return Err(Error::Domain(
                        "fixed cluster size must be at least 1".into(),
                    ));
                }
                (m as f64, 0.0)
            }
        };
        Ok(Self {
            kind,
            eta_m,
            sigma2_m,
        })
    }

    pub fn kind(&self) -> ClusterSizeKind {
        self.kind
    }

    /// Mean cluster size.
    pub fn eta_m(&self) -> f64 {
        self.eta_m
    }

    /// Cluster-size variance.
    pub fn sigma2_m(&self) -> f64 {
        self.sigma2_m
    }

    /// `E[m(m - 1)] = eta^2 + sigma^2 - eta`, the expected number of ordered
    /// within-cluster pairs.
    pub fn pair_moment(&self) -> f64 {
        self.eta_m * self.eta_m + self.sigma2_m - self.eta_m
    }

    /// Inclusive support `(lo, hi)`.
    pub fn support(&self) -> (u32, u32) {
        match self.kind {
            ClusterSizeKind::DiscreteUniform { lo, hi } => (lo, hi),
            ClusterSizeKind::TruncatedPoisson { lo, hi, .. } => (lo, hi),
            ClusterSizeKind::Fixed { m } => (m, m),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            ClusterSizeKind::DiscreteUniform { lo, hi } => format!("DU({lo},{hi})"),
            ClusterSizeKind::TruncatedPoisson { rate, lo, hi } => {
                format!("TrunPoisson({rate},{lo},{hi})")
            }
            ClusterSizeKind::Fixed { m } => format!("Fixed({m})"),
        }
    }
}

fn check_support(lo: u32, hi: u32) -> Result<()> {
    if lo < 1 {
        return Err(Error::Domain(
            "cluster-size lower bound must be at least 1".into(),
        ));
    }
    if lo > hi {
        return Err(Error::Domain(format!(
            "cluster-size bounds lo = {lo} > hi = {hi}"
        )));
    }
    Ok(())
}

fn truncated_poisson_moments(rate: f64, lo: u32, hi: u32) -> Result<(f64, f64)> {
    let log_pmf = |k: u32| k as f64 * rate.ln() - rate - ln_gamma(k as f64 + 1.0);
    // Shift by the largest log mass so the renormalization never underflows.
    let shift = (lo..=hi).map(log_pmf).fold(f64::NEG_INFINITY, f64::max);
    let (mut total, mut first, mut second) = (0.0, 0.0, 0.0);
    for k in lo..=hi {
        let w = (log_pmf(k) - shift).exp();
        let kf = k as f64;
        total += w;
        first += w * kf;
        second += w * kf * kf;
    }
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Domain(format!(
            "truncated Poisson({rate}) has no mass on [{lo}, {hi}]"
        )));
    }
    let mean = first / total;
    Ok((mean, (second / total - mean * mean).max(0.0)))
}

/// How the structural-zero probability of the intervention arm is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ZeroEffect {
    /// Share `q` of the log effect attributed to the structural-zero part.
    Q(f64),
    /// Intervention-arm structural-zero probability given directly.
    P2(f64),
}

/// Raw design-stage parameters before validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub beta1: f64,
    pub beta2: f64,
    pub p1: f64,
    pub zero_effect: ZeroEffect,
    pub rho_s: f64,
    pub rho_u: f64,
    pub r_bar: f64,
    pub cluster_sizes: ClusterSizeModel,
    pub alpha: f64,
    pub power: f64,
}

/// Validated design-stage inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignInputs {
    control: ArmProfile,
    intervention: ArmProfile,
    beta1: f64,
    beta2: f64,
    q: Option<f64>,
    rho_s: f64,
    rho_u: f64,
    r_bar: f64,
    cluster_sizes: ClusterSizeModel,
    alpha: f64,
    power: f64,
}

impl DesignInputs {
    pub fn new(params: DesignParams) -> Result<Self> {
        if !params.beta1.is_finite() {
            return Err(Error::Domain(format!(
                "beta1 = {} must be finite",
                params.beta1
            )));
        }
        if !params.beta2.is_finite() {
            return Err(Error::Domain(format!(
                "beta2 = {} must be finite",
                params.beta2
            )));
        }
        check_zero_probability("p1", params.p1)?;
        let (p2, q) = match params.zero_effect {
            ZeroEffect::Q(q) => (p2_from_q(params.p1, params.beta2, q)?, Some(q)),
            ZeroEffect::P2(p2) => {
                check_zero_probability("p2", p2)?;
                let q = if params.beta2 == 0.0 {
                    None
                } else {
                    Some(((1.0 - p2).ln() - (1.0 - params.p1).ln()) / params.beta2)
                };
                (p2, q)
            }
        };
        let control = ArmProfile::new(params.beta1.exp(), params.p1)?;
        let intervention = ArmProfile::new((params.beta1 + params.beta2).exp(), p2)?;
        Self::assemble(control, intervention, params.beta1, params.beta2, q, params)
    }

    /// Builds a design from two fully specified arm profiles; `beta` values
    /// are derived from the arm means.
    #[allow(clippy::too_many_arguments)]
    pub fn from_arms(
        control: ArmProfile,
        intervention: ArmProfile,
        rho_s: f64,
        rho_u: f64,
        r_bar: f64,
        cluster_sizes: ClusterSizeModel,
        alpha: f64,
        power: f64,
    ) -> Result<Self> {
        let beta1 = control.mu().ln();
        let beta2 = intervention.mu().ln() - beta1;
        let q = decompose_arms(&control, &intervention).2;
        let params = DesignParams {
            beta1,
            beta2,
            p1: control.p(),
            zero_effect: ZeroEffect::P2(intervention.p()),
            rho_s,
            rho_u,
            r_bar,
            cluster_sizes,
            alpha,
            power,
        };
        Self::assemble(control, intervention, beta1, beta2, q, params)
    }

    fn assemble(
        control: ArmProfile,
        intervention: ArmProfile,
        beta1: f64,
        beta2: f64,
        q: Option<f64>,
        params: DesignParams,
    ) -> Result<Self> {
        check_icc("rho_s", params.rho_s)?;
        check_icc("rho_u", params.rho_u)?;
        check_open_unit("r_bar", params.r_bar)?;
        check_open_unit("alpha", params.alpha)?;
        check_open_unit("power", params.power)?;
        Ok(Self {
            control,
            intervention,
            beta1,
            beta2,
            q,
            rho_s: params.rho_s,
            rho_u: params.rho_u,
            r_bar: params.r_bar,
            cluster_sizes: params.cluster_sizes,
            alpha: params.alpha,
            power: params.power,
        })
    }

    /// Parameters that reproduce this design through [`DesignInputs::new`].
    pub fn params(&self) -> DesignParams {
        DesignParams {
            beta1: self.beta1,
            beta2: self.beta2,
            p1: self.control.p(),
            zero_effect: match self.q {
                Some(q) => ZeroEffect::Q(q),
                None => ZeroEffect::P2(self.intervention.p()),
            },
            rho_s: self.rho_s,
            rho_u: self.rho_u,
            r_bar: self.r_bar,
            cluster_sizes: self.cluster_sizes,
            alpha: self.alpha,
            power: self.power,
        }
    }

    /// Same design with the structural-zero share set to `q`; `beta2` is kept.
    pub fn with_q(&self, q: f64) -> Result<Self> {
        Self::new(DesignParams {
            zero_effect: ZeroEffect::Q(q),
            ..self.params()
        })
    }

    /// Null counterpart used for type I error runs: `beta2 = 0`, so the
    /// intervention arm coincides with the control arm.
    pub fn null_counterpart(&self) -> Self {
        Self {
            intervention: self.control,
            beta2: 0.0,
            ..*self
        }
    }

    /// Arms exchanged, allocation mirrored and the effect sign flipped.
    pub fn swapped(&self) -> Result<Self> {
        Self::from_arms(
            self.intervention,
            self.control,
            self.rho_s,
            self.rho_u,
            1.0 - self.r_bar,
            self.cluster_sizes,
            self.alpha,
            self.power,
        )
    }

    pub fn with_cluster_sizes(&self, cluster_sizes: ClusterSizeModel) -> Self {
        Self {
            cluster_sizes,
            ..*self
        }
    }

    pub fn with_error_rates(&self, alpha: f64, power: f64) -> Result<Self> {
        check_open_unit("alpha", alpha)?;
        check_open_unit("power", power)?;
        Ok(Self {
            alpha,
            power,
            ..*self
        })
    }

    pub fn control(&self) -> &ArmProfile {
        &self.control
    }

    pub fn intervention(&self) -> &ArmProfile {
        &self.intervention
    }

    /// Arm profile by indicator (0 control, 1 intervention).
    pub fn arm(&self, arm: u8) -> &ArmProfile {
        if arm == 0 {
            &self.control
        } else {
            &self.intervention
        }
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    /// Structural-zero share of the effect; absent when `beta2 == 0` and the
    /// design was given through `p2`.
    pub fn q(&self) -> Option<f64> {
        self.q
    }

    pub fn rho_s(&self) -> f64 {
        self.rho_s
    }

    pub fn rho_u(&self) -> f64 {
        self.rho_u
    }

    pub fn r_bar(&self) -> f64 {
        self.r_bar
    }

    pub fn cluster_sizes(&self) -> &ClusterSizeModel {
        &self.cluster_sizes
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn power(&self) -> f64 {
        self.power
    }
}

/// Marginal variance `mu + p/(1-p) mu^2` of a ZIP outcome.
pub fn marginal_variance(arm: &ArmProfile) -> f64 {
    arm.mu() + arm.zero_odds() * arm.mu() * arm.mu()
}

/// Intervention-arm structural-zero probability implied by `q`:
/// `p2 = 1 - exp(q beta2) (1 - p1)`.
pub fn p2_from_q(p1: f64, beta2: f64, q: f64) -> Result<f64> {
    check_zero_probability("p1", p1)?;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("q = {q} must lie in [0, 1]")));
    }
    let p2 = 1.0 - (q * beta2).exp() * (1.0 - p1);
    if !(0.0..1.0).contains(&p2) {
        return Err(Error::Domain(format!(
            "p1 = {p1}, beta2 = {beta2}, q = {q} give p2 = {p2} outside [0, 1)"
        )));
    }
    Ok(p2)
}

/// Split of the log effect into Poisson and structural-zero parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectDecomposition {
    /// `log lambda2 - log lambda1`.
    pub poisson_log_effect: f64,
    /// `log(1 - p2) - log(1 - p1)`.
    pub zero_log_effect: f64,
    /// `zero_log_effect / beta2`; `None` when `beta2 == 0`.
    pub q: Option<f64>,
}

pub fn decompose_effect(design: &DesignInputs) -> EffectDecomposition {
    let (poisson_log_effect, zero_log_effect, q) =
        decompose_arms(design.control(), design.intervention());
    EffectDecomposition {
        poisson_log_effect,
        zero_log_effect,
        q,
    }
}

fn decompose_arms(control: &ArmProfile, intervention: &ArmProfile) -> (f64, f64, Option<f64>) {
    let poisson = intervention.lambda().ln() - control.lambda().ln();
    let zero = (1.0 - intervention.p()).ln() - (1.0 - control.p()).ln();
    let beta2 = intervention.mu().ln() - control.mu().ln();
    let q = if beta2 == 0.0 {
        None
    } else if zero == 0.0 {
        Some(0.0)
    } else {
        Some(zero / beta2)
    };
    (poisson, zero, q)
}

/// Which expression for `P(y = 0)` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ZeroProbabilityForm {
    /// `p + (1 - p) exp(-lambda)`, the ZIP mixture mass at zero.
    #[default]
    Mixture,
    /// `exp(-lambda) + p`. Not a probability in general; kept for
    /// compatibility with published worked examples that used it.
    Printed,
}

/// `P(y = 0) = p + (1 - p) exp(-lambda)`.
pub fn zero_probability(arm: &ArmProfile) -> f64 {
    zero_probability_with(arm.p(), arm.lambda(), ZeroProbabilityForm::Mixture)
}

pub fn zero_probability_with(p: f64, lambda: f64, form: ZeroProbabilityForm) -> f64 {
    match form {
        ZeroProbabilityForm::Mixture => p + (1.0 - p) * (-lambda).exp(),
        ZeroProbabilityForm::Printed => (-lambda).exp() + p,
    }
}

/// Structural-zero probability that reproduces an observed mean and zero
/// proportion under the mixture form.
pub fn infer_p1_from_observed(mean: f64, zero_proportion: f64) -> Result<f64> {
    infer_p1_with(mean, zero_proportion, ZeroProbabilityForm::Mixture)
}

/// Solves `P(y = 0; p, lambda = mean/(1-p)) = zero_proportion` for `p` by
/// bisection on `[0, 1 - 1e-9]`.
pub fn infer_p1_with(mean: f64, zero_proportion: f64, form: ZeroProbabilityForm) -> Result<f64> {
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::Domain(format!(
            "observed mean = {mean} must be positive"
        )));
    }
    check_open_unit("zero_proportion", zero_proportion)?;
    if zero_proportion <= (-mean).exp() {
        return Ok(0.0);
    }
    let objective = |p: f64| zero_probability_with(p, mean / (1.0 - p), form) - zero_proportion;
    let (mut lo, mut hi) = (0.0_f64, BISECTION_UPPER);
    if objective(hi) < 0.0 {
        return Err(Error::Infeasible(format!(
            "zero proportion {zero_proportion} is unreachable for mean {mean}"
        )));
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if objective(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < BISECTION_TOL {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Within-cluster covariance `Cov(y_ij, y_ij')`, `j != j'`:
/// `mu rho_u [1 - p (1 - rho_s)] + mu^2 rho_s p / (1 - p)`.
///
/// Obtained by conditioning on the pair of structural-zero indicators, with
/// `s` independent of the Poisson components.
pub fn pairwise_covariance_factor(arm: &ArmProfile, rho_s: f64, rho_u: f64) -> f64 {
    let (mu, p) = (arm.mu(), arm.p());
    mu * rho_u * (1.0 - p * (1.0 - rho_s)) + mu * mu * rho_s * arm.zero_odds()
}

/// The alternative closed form for the covariance term as it appears in print.
/// It disagrees with the pair enumeration and is exposed for comparison only.
pub fn pairwise_covariance_factor_printed(arm: &ArmProfile, rho_s: f64, rho_u: f64) -> f64 {
    let (mu, p) = (arm.mu(), arm.p());
    mu * (arm.zero_odds() * rho_s - 2.0 * (mu + 2.0) * p * p * (rho_s - 1.0)
        + p * (rho_s - 1.0) * (rho_u + 2.0)
        + rho_u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Conditions on `(s, s')` and sums probability-weighted cross products.
    fn enumerated_covariance(mu: f64, p: f64, rho_s: f64, rho_u: f64) -> f64 {
        let lambda = mu / (1.0 - p);
        let both_structural = p * p + p * (1.0 - p) * rho_s;
        let one_structural = 2.0 * p * (1.0 - p) * (1.0 - rho_s);
        let neither = (1.0 - p) * (1.0 - p + rho_s * p);
        // E[(0 - mu)(0 - mu)]
        let e11 = mu * mu;
        // E[(0 - mu)(u - mu)] = -mu (lambda - mu)
        let e10 = -mu * (lambda - mu);
        // E[(u - mu)(u' - mu)] = Cov(u, u') + (lambda - mu)^2
        let e00 = rho_u * lambda + (lambda - mu) * (lambda - mu);
        let sum = both_structural * e11 + one_structural * e10 + neither * e00;
        // The s-marginals are p, so the pair probabilities sum to one and the
        // sum above is the covariance.
        assert!((both_structural + one_structural + neither - 1.0).abs() < 1e-14);
        sum
    }

    #[test]
    fn marginal_variance_examples() {
        assert_abs_diff_eq!(marginal_variance(&ArmProfile::new(1.0, 0.0).unwrap()), 1.0);
        assert_abs_diff_eq!(marginal_variance(&ArmProfile::new(1.0, 0.5).unwrap()), 2.0);
        let v = marginal_variance(&ArmProfile::new(1.21, 0.121).unwrap());
        assert_abs_diff_eq!(v, 1.4115427758816836, epsilon = 1e-12);
    }

    #[test]
    fn marginal_variance_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (mu, p, expected) in [(1.0, 0.5, 2.0), (1.21, 0.121, 1.4115427758816836)] {
            let arm = ArmProfile::new(mu, p).unwrap();
            let pois = Poisson::new(arm.lambda()).unwrap();
            let n = 1_000_000;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let y = if rng.random_bool(p) {
                    0.0
                } else {
                    pois.sample(&mut rng)
                };
                s += y;
                s2 += y * y;
            }
            let mean = s / n as f64;
            let var = s2 / n as f64 - mean * mean;
            assert!(
                ((var - expected) / expected).abs() < 0.01,
                "var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn profile_identity() {
        let a = ArmProfile::from_lambda(1.4938, 0.19).unwrap();
        assert!((a.mu() - (1.0 - a.p()) * a.lambda()).abs() < 1e-12);
        assert!(ArmProfile::new(1.0, 1.0).is_err());
        assert!(ArmProfile::new(0.0, 0.2).is_err());
    }

    #[test]
    fn p2_from_q_examples() {
        assert_abs_diff_eq!(p2_from_q(0.5, -0.431, 0.0).unwrap(), 0.5);
        assert_abs_diff_eq!(
            p2_from_q(0.5, -0.431, 0.5).unwrap(),
            0.5969308648709413,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            p2_from_q(0.121, -0.1805, 0.5).unwrap(),
            0.19685529942209845,
            epsilon = 1e-12
        );
    }

    #[test]
    fn p2_from_q_rejects_out_of_range() {
        // exp(1.0) * 0.5 > 1 so p2 < 0
        let err = p2_from_q(0.5, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("beta2 = 1"));
        assert!(p2_from_q(0.5, -0.431, 1.2).is_err());
    }

    #[test]
    fn decompose_examples() {
        let sizes = ClusterSizeModel::fixed(10).unwrap();
        let control = ArmProfile::new(1.0, 0.5).unwrap();
        let intervention = ArmProfile::new(0.65, 0.5).unwrap();
        let d = DesignInputs::from_arms(control, intervention, 0.03, 0.03, 0.5, sizes, 0.05, 0.8)
            .unwrap();
        let dec = decompose_effect(&d);
        assert_eq!(dec.zero_log_effect, 0.0);
        assert_eq!(dec.q, Some(0.0));

        let intervention = ArmProfile::new((-0.431_f64).exp(), 0.59693).unwrap();
        let d = DesignInputs::from_arms(control, intervention, 0.03, 0.03, 0.5, sizes, 0.05, 0.8)
            .unwrap();
        let dec = decompose_effect(&d);
        assert_abs_diff_eq!(
            dec.zero_log_effect,
            (0.40307_f64 / 0.5).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(dec.q.unwrap(), 0.50007, epsilon = 1e-4);
        assert_abs_diff_eq!(
            dec.poisson_log_effect + dec.zero_log_effect,
            d.beta2(),
            epsilon = 1e-12
        );

        let flat = DesignInputs::from_arms(
            ArmProfile::new(1.0, 0.0).unwrap(),
            ArmProfile::new(0.7, 0.0).unwrap(),
            0.0,
            0.0,
            0.5,
            sizes,
            0.05,
            0.8,
        )
        .unwrap();
        assert_eq!(decompose_effect(&flat).q, Some(0.0));

        let null = d.null_counterpart();
        assert_eq!(decompose_effect(&null).q, None);
    }

    #[test]
    fn zero_probability_examples() {
        let a = ArmProfile::from_lambda(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(zero_probability(&a), (-1.0_f64).exp());
        let a = ArmProfile::from_lambda(3.0, 1.0 - 1e-9).unwrap();
        assert!(zero_probability(&a) > 1.0 - 1e-8);
        let a = ArmProfile::new(1.21, 0.19).unwrap();
        assert_abs_diff_eq!(zero_probability(&a), 0.37185453098370325, epsilon = 1e-12);
    }

    #[test]
    fn infer_p1_examples() {
        assert_eq!(
            infer_p1_from_observed(1.21, (-1.21_f64).exp()).unwrap(),
            0.0
        );
        let p = infer_p1_from_observed(1.21, 0.372).unwrap();
        assert_abs_diff_eq!(p, 0.19033045467797613, epsilon = 1e-9);
        let p = infer_p1_from_observed(1.0, 0.60).unwrap();
        assert_abs_diff_eq!(p, 0.551893406214858, epsilon = 1e-9);
        let back = zero_probability(&ArmProfile::new(1.0, p).unwrap());
        assert_abs_diff_eq!(back, 0.60, epsilon = 1e-8);
    }

    #[test]
    fn infer_p1_printed_form_is_near_published_value() {
        let p = infer_p1_with(1.21, 0.372, ZeroProbabilityForm::Printed).unwrap();
        assert_abs_diff_eq!(p, 0.1186125429811338, epsilon = 1e-9);
    }

    #[test]
    fn infer_p1_objective_is_monotone() {
        for mean in [0.3, 1.0, 1.21, 4.0] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..1000 {
                let p = i as f64 / 1000.0 * (1.0 - 1e-9);
                let z = zero_probability_with(p, mean / (1.0 - p), ZeroProbabilityForm::Mixture);
                assert!(z >= prev);
                prev = z;
            }
        }
    }

    #[test]
    fn infer_p1_rejects_bad_inputs() {
        assert!(matches!(
            infer_p1_from_observed(1.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            infer_p1_from_observed(-1.0, 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn covariance_examples() {
        let a = ArmProfile::new(1.0, 0.5).unwrap();
        assert_abs_diff_eq!(
            pairwise_covariance_factor(&a, 0.03, 0.03),
            0.04545,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            enumerated_covariance(1.0, 0.5, 0.03, 0.03),
            0.04545,
            epsilon = 1e-12
        );
        let a = ArmProfile::new(2.7, 0.0).unwrap();
        assert_eq!(pairwise_covariance_factor(&a, 0.4, 0.0), 0.0);
        let a = ArmProfile::new(0.64986, 0.59693).unwrap();
        let z = pairwise_covariance_factor(&a, 0.05, 0.05);
        assert_abs_diff_eq!(z, 0.045339, epsilon = 1e-6);
        assert_abs_diff_eq!(
            z,
            enumerated_covariance(0.64986, 0.59693, 0.05, 0.05),
            epsilon = 1e-12
        );
    }

    #[test]
    fn printed_covariance_differs_from_enumeration() {
        let a = ArmProfile::new(1.0, 0.5).unwrap();
        assert_abs_diff_eq!(
            pairwise_covariance_factor_printed(&a, 0.03, 0.03),
            0.53045,
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_matches_enumeration_on_grid() {
        let mus = [0.1, 0.5, 1.0, 2.5, 7.0];
        let ps = [0.0, 0.1, 0.35, 0.6, 0.9];
        let rho_ss = [0.0, 0.03, 0.4];
        let rho_us = [0.0, 0.05, 0.7];
        let mut n = 0;
        for &mu in &mus {
            for &p in &ps {
                for &rs in &rho_ss {
                    for &ru in &rho_us {
                        let arm = ArmProfile::new(mu, p).unwrap();
                        let closed = pairwise_covariance_factor(&arm, rs, ru);
                        let oracle = enumerated_covariance(mu, p, rs, ru);
                        assert!((closed - oracle).abs() < 1e-12, "{mu} {p} {rs} {ru}");
                        n += 1;
                    }
                }
            }
        }
        assert_eq!(n, 225);
    }

    #[test]
    fn covariance_monotone_in_iccs() {
        for mu in [0.2, 1.0, 3.0] {
            for p in [0.05, 0.5, 0.8] {
                let arm = ArmProfile::new(mu, p).unwrap();
                for i in 0..20 {
                    let lo = i as f64 * 0.045;
                    let hi = lo + 0.045;
                    for other in [0.0, 0.2, 0.6] {
                        assert!(
                            pairwise_covariance_factor(&arm, other, hi)
                                > pairwise_covariance_factor(&arm, other, lo)
                        );
                        assert!(
                            pairwise_covariance_factor(&arm, hi, other)
                                > pairwise_covariance_factor(&arm, lo, other)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn overdispersion_is_strict() {
        for mu in [0.1, 1.0, 10.0] {
            for p in [1e-6, 0.2, 0.9] {
                let arm = ArmProfile::new(mu, p).unwrap();
                assert!(marginal_variance(&arm) > arm.mu());
            }
        }
    }

    #[test]
    fn q_round_trip() {
        let sizes = ClusterSizeModel::fixed(5).unwrap();
        for beta2 in [-1.0, -0.431, -0.18] {
            for i in 0..=20 {
                let q = i as f64 / 20.0;
                let design = DesignInputs::new(DesignParams {
                    beta1: 0.0,
                    beta2,
                    p1: 0.5,
                    zero_effect: ZeroEffect::Q(q),
                    rho_s: 0.03,
                    rho_u: 0.03,
                    r_bar: 0.5,
                    cluster_sizes: sizes,
                    alpha: 0.05,
                    power: 0.8,
                })
                .unwrap();
                let recovered = decompose_effect(&design).q.unwrap();
                assert!((recovered - q).abs() < 1e-10, "{beta2} {q} {recovered}");
            }
        }
    }

    #[test]
    fn cluster_size_moments() {
        let du = ClusterSizeModel::discrete_uniform(34, 56).unwrap();
        assert_eq!((du.eta_m(), du.sigma2_m()), (45.0, 44.0));
        let du = ClusterSizeModel::discrete_uniform(10, 80).unwrap();
        assert_eq!((du.eta_m(), du.sigma2_m()), (45.0, 420.0));
        let tp = ClusterSizeModel::truncated_poisson(45.0, 20, 70).unwrap();
        assert_abs_diff_eq!(tp.eta_m(), 44.99456434020117, epsilon = 1e-9);
        assert_abs_diff_eq!(tp.sigma2_m(), 44.84472555933644, epsilon = 1e-8);
        let fixed = ClusterSizeModel::fixed(45).unwrap();
        assert_eq!((fixed.eta_m(), fixed.sigma2_m()), (45.0, 0.0));
        assert!(ClusterSizeModel::discrete_uniform(0, 5).is_err());
        assert!(ClusterSizeModel::discrete_uniform(6, 5).is_err());
        assert!(ClusterSizeModel::fixed(0).is_err());
        assert!(ClusterSizeModel::truncated_poisson(-1.0, 1, 5).is_err());
    }

    #[test]
    fn truncated_poisson_far_tail_does_not_underflow() {
        let tp = ClusterSizeModel::truncated_poisson(2000.0, 1, 3).unwrap();
        assert!(tp.eta_m() > 2.9 && tp.eta_m() <= 3.0);
    }

    #[test]
    fn design_invariants() {
        let d = DesignInputs::new(DesignParams {
            beta1: 0.19,
            beta2: -0.18,
            p1: 0.121,
            zero_effect: ZeroEffect::Q(0.4),
            rho_s: 0.05,
            rho_u: 0.05,
            r_bar: 0.5,
            cluster_sizes: ClusterSizeModel::discrete_uniform(127, 147).unwrap(),
            alpha: 0.05,
            power: 0.8,
        })
        .unwrap();
        assert!((d.beta1().exp() - d.control().mu()).abs() < 1e-12);
        assert!(((d.beta1() + d.beta2()).exp() - d.intervention().mu()).abs() < 1e-12);
        let bad = DesignParams {
            r_bar: 1.0,
            ..d.params()
        };
        assert!(DesignInputs::new(bad).is_err());
        let bad = DesignParams {
            rho_s: 1.0,
            ..d.params()
        };
        assert!(DesignInputs::new(bad).is_err());
    }
}
