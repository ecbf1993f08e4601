//! GEE estimation of the marginalized ZIP model.
//!
//! The mean model is `log mu_i = beta1 + beta2 r_i` under working
//! independence with ZIP variance weights; the structural-zero model is
//! `logit p_i = alpha1 + alpha2 r_i`, fitted by the expectation-solution
//! algorithm (latent indicators replaced by their conditional means).
//!
//! Every covariate lives at the cluster level, so the estimating equations
//! only see per-arm subject counts, outcome totals and zero counts, and the
//! sandwich only needs per-cluster residual sums. All routines work on those
//! summaries; subject-level data enter through [`ClusterSummary`].

use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

use crate::design::zero_odds;
use crate::error::{Error, Result};
use crate::quantile::{normal_quantile, t_quantile};
use crate::simulate::{ClusterRecord, TrialDataset};

const BETA_TOL: f64 = 1e-8;
const BETA_MAX_ITER: usize = 100;
const ES_TOL: f64 = 1e-6;
const ES_MAX_ITER: usize = 100;
const LOGIT_TOL: f64 = 1e-12;
const LOGIT_MAX_ITER: usize = 100;
/// Structural-zero probabilities below this are snapped to the boundary 0.
const P_FLOOR: f64 = 1e-8;
const INIT_OFFSET: f64 = 1e-6;

fn design_row(arm: usize) -> Vector2<f64> {
    Vector2::new(1.0, arm as f64)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Sufficient statistics of one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterSummary {
    pub cluster_id: u64,
    pub arm: u8,
    pub size: u32,
    pub total: u64,
    pub zeros: u32,
}

impl From<&ClusterRecord> for ClusterSummary {
    fn from(c: &ClusterRecord) -> Self {
        Self {
            cluster_id: c.cluster_id,
            arm: c.arm,
            size: c.outcomes.len() as u32,
            total: c.outcomes.iter().map(|&y| y as u64).sum(),
            zeros: c.outcomes.iter().filter(|&&y| y == 0).count() as u32,
        }
    }
}

pub fn summarize(data: &TrialDataset) -> Vec<ClusterSummary> {
    data.clusters().iter().map(ClusterSummary::from).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ArmTotals {
    clusters: usize,
    subjects: f64,
    total: f64,
    zeros: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Totals([ArmTotals; 2]);

impl Totals {
    fn from_summaries(summaries: &[ClusterSummary]) -> Self {
        let mut t = Self::default();
        for s in summaries {
            t.add(s, 1.0);
        }
        t
    }

    fn add(&mut self, s: &ClusterSummary, sign: f64) {
        let a = &mut self.0[s.arm as usize];
        if sign > 0.0 {
            a.clusters += 1;
        } else {
            a.clusters -= 1;
        }
        a.subjects += sign * s.size as f64;
        a.total += sign * s.total as f64;
        a.zeros += sign * s.zeros as f64;
    }

    fn without(&self, s: &ClusterSummary) -> Self {
        let mut t = *self;
        t.add(s, -1.0);
        t
    }

    fn check_arms(&self) -> Result<()> {
        for (k, a) in self.0.iter().enumerate() {
            if a.clusters == 0 {
                return Err(Error::Estimation(format!("arm {k} has no clusters")));
            }
        }
        Ok(())
    }
}

/// Newton-Raphson solution of the mean-model score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaFit {
    pub beta: [f64; 2],
    /// Iterates after each Newton step.
    pub trace: Vec<[f64; 2]>,
    pub converged: bool,
}

/// Solves the working-independence score for `beta` given per-arm
/// structural-zero probabilities.
pub fn fit_beta(data: &TrialDataset, p_hat: [f64; 2]) -> Result<BetaFit> {
    fit_beta_totals(&Totals::from_summaries(&summarize(data)), p_hat, None)
}

fn default_beta_init(totals: &Totals) -> [f64; 2] {
    let mean = |a: &ArmTotals| a.total / a.subjects + INIT_OFFSET;
    let (c, i) = (mean(&totals.0[0]), mean(&totals.0[1]));
    [c.ln(), (i / c).ln()]
}

fn fit_beta_totals(totals: &Totals, p_hat: [f64; 2], init: Option<[f64; 2]>) -> Result<BetaFit> {
    totals.check_arms()?;
    for (k, (&p, a)) in p_hat.iter().zip(&totals.0).enumerate() {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Estimation(format!(
                "p_hat[{k}] = {p} outside [0, 1)"
            )));
        }
        if a.total == 0.0 {
            return Err(Error::Estimation(format!(
                "arm {k} has all-zero outcomes; its log mean is undefined"
            )));
        }
    }
    let mut beta = Vector2::from(init.unwrap_or_else(|| default_beta_init(totals)));
    let mut trace = Vec::new();
    for _ in 0..BETA_MAX_ITER {
        let mut score = Vector2::zeros();
        let mut info = Matrix2::zeros();
        for (k, a) in totals.0.iter().enumerate() {
            let z = design_row(k);
            let mu = z.dot(&beta).exp();
            let w = 1.0 / (1.0 + zero_odds(p_hat[k]) * mu);
            score += z * (w * (a.total - a.subjects * mu));
            info += z * z.transpose() * (a.subjects * mu * w);
        }
        let step = info
            .try_inverse()
            .ok_or_else(|| Error::Estimation("singular mean-model information".into()))?
            * score;
        beta += step;
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::Estimation("Newton-Raphson diverged".into()));
        }
        trace.push([beta[0], beta[1]]);
        if step.amax() < BETA_TOL {
            return Ok(BetaFit {
                beta: [beta[0], beta[1]],
                trace,
                converged: true,
            });
        }
    }
    Ok(BetaFit {
        beta: [beta[0], beta[1]],
        trace,
        converged: false,
    })
}

/// `E[s | y]` for the structural-zero indicator: zero for a positive count,
/// otherwise `[1 + (1 - p) exp(-lambda) / p]^{-1}`.
pub fn conditional_zero_mean(y: u32, p: f64, lambda: f64) -> f64 {
    if y > 0 || p == 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + (1.0 - p) / p * (-lambda).exp())
}

/// Solution of the intercept-plus-arm logistic estimating equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZeroModelFit {
    /// `(alpha1, alpha2)`; infinite components mark a boundary solution.
    pub alpha: [f64; 2],
    pub p: [f64; 2],
    /// Some arm's solution sits on the boundary `p = 0` or `p = 1`.
    pub boundary: bool,
    pub converged: bool,
}

fn alpha_from_p(p: [f64; 2]) -> [f64; 2] {
    let a1 = logit(p[0]);
    let a2 = logit(p[1]) - a1;
    [a1, if a2.is_nan() { 0.0 } else { a2 }]
}

/// Newton solve of `sum_k Z_k (R_k - n_k p_k) = 0` where `R_k` aggregates the
/// binary (or fractional) responses of arm `k`.
fn solve_logit(subjects: [f64; 2], responses: [f64; 2], init: [f64; 2]) -> ZeroModelFit {
    let fractions = [responses[0] / subjects[0], responses[1] / subjects[1]];
    let boundary = fractions.iter().any(|&f| f <= P_FLOOR || f >= 1.0);
    if boundary {
        let p = fractions.map(|f| if f <= P_FLOOR { 0.0 } else { f.min(1.0) });
        return ZeroModelFit {
            alpha: alpha_from_p(p),
            p,
            boundary: true,
            converged: true,
        };
    }
    let start = if init.iter().all(|a| a.is_finite()) {
        init
    } else {
        [0.0, 0.0]
    };
    let mut alpha = Vector2::from(start);
    let mut converged = false;
    for _ in 0..LOGIT_MAX_ITER {
        let mut score = Vector2::zeros();
        let mut info = Matrix2::zeros();
        for k in 0..2 {
            let z = design_row(k);
            let p = logistic(z.dot(&alpha));
            score += z * (responses[k] - subjects[k] * p);
            info += z * z.transpose() * (subjects[k] * p * (1.0 - p));
        }
        let Some(inv) = info.try_inverse() else { break };
        let step = inv * score;
        alpha += step;
        if step.amax() < LOGIT_TOL {
            converged = true;
            break;
        }
    }
    let alpha = [alpha[0], alpha[1]];
    ZeroModelFit {
        alpha,
        p: [logistic(alpha[0]), logistic(alpha[0] + alpha[1])],
        boundary: false,
        converged,
    }
}

/// Solves the structural-zero estimating equation with subject-level
/// responses (observed indicators or their conditional means), given in the
/// same cluster order and shape as `data`.
pub fn fit_zero_model(data: &TrialDataset, responses: &[Vec<f64>]) -> Result<ZeroModelFit> {
    if responses.len() != data.n_clusters() {
        return Err(Error::Estimation(
            "one response vector per cluster is required".into(),
        ));
    }
    let mut subjects = [0.0; 2];
    let mut sums = [0.0; 2];
    for (c, r) in data.clusters().iter().zip(responses) {
        if r.len() != c.outcomes.len() {
            return Err(Error::Estimation(format!(
                "cluster {} has {} outcomes but {} responses",
                c.cluster_id,
                c.outcomes.len(),
                r.len()
            )));
        }
        subjects[c.arm as usize] += r.len() as f64;
        sums[c.arm as usize] += r.iter().sum::<f64>();
    }
    if subjects.contains(&0.0) {
        return Err(Error::Estimation("both arms need subjects".into()));
    }
    Ok(solve_logit(subjects, sums, [0.0, 0.0]))
}

/// Result of the expectation-solution iterations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsFit {
    pub alpha_hat: [f64; 2],
    pub p_hat: [f64; 2],
    pub beta_hat: [f64; 2],
    pub converged: bool,
    pub iterations: usize,
    /// An arm's structural-zero probability ended on the boundary.
    pub degenerate: bool,
}

/// Fits `(alpha, beta)` by alternating the mean-model GEE with the
/// expectation-solution update of the structural-zero model, starting from a
/// logistic regression of the zero indicators.
pub fn fit_alpha_es(data: &TrialDataset) -> Result<EsFit> {
    es_from_totals(&Totals::from_summaries(&summarize(data)), None)
}

/// One expectation-solution update from `alpha`: fits `beta` at
/// `p = logistic(alpha)`, recomputes the conditional means and re-solves for
/// `alpha`. Returns the updated `(alpha, beta)`.
pub fn expectation_solution_step(
    data: &TrialDataset,
    alpha: [f64; 2],
) -> Result<([f64; 2], [f64; 2])> {
    let totals = Totals::from_summaries(&summarize(data));
    let p = [logistic(alpha[0]), logistic(alpha[0] + alpha[1])];
    let (fit, beta) = es_step(&totals, alpha, p, None)?;
    Ok((fit.alpha, beta.beta))
}

fn es_step(
    totals: &Totals,
    alpha: [f64; 2],
    p: [f64; 2],
    beta_init: Option<[f64; 2]>,
) -> Result<(ZeroModelFit, BetaFit)> {
    let beta = fit_beta_totals(totals, p, beta_init)?;
    let mut responses = [0.0; 2];
    let mut subjects = [0.0; 2];
    for (k, a) in totals.0.iter().enumerate() {
        let mu = design_row(k).dot(&Vector2::from(beta.beta)).exp();
        let lambda = mu / (1.0 - p[k]);
        responses[k] = a.zeros * conditional_zero_mean(0, p[k], lambda);
        subjects[k] = a.subjects;
    }
    Ok((solve_logit(subjects, responses, alpha), beta))
}

fn change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

fn es_from_totals(totals: &Totals, start: Option<&EsFit>) -> Result<EsFit> {
    totals.check_arms()?;
    let subjects = [totals.0[0].subjects, totals.0[1].subjects];
    let initial = match start {
        Some(fit) => ZeroModelFit {
            alpha: fit.alpha_hat,
            p: fit.p_hat,
            boundary: fit.degenerate,
            converged: true,
        },
        None => solve_logit(subjects, [totals.0[0].zeros, totals.0[1].zeros], [0.0, 0.0]),
    };
    if initial.p.iter().any(|&p| p >= 1.0) {
        return Err(Error::Estimation("an arm has only zero outcomes".into()));
    }
    let mut zero_fit = initial;
    let mut beta: Option<[f64; 2]> = start.map(|f| f.beta_hat);
    for iteration in 1..=ES_MAX_ITER {
        let (next, beta_fit) = es_step(totals, zero_fit.alpha, zero_fit.p, beta)?;
        if !beta_fit.converged {
            return Err(Error::NonConvergence {
                iterations: BETA_MAX_ITER,
                context: "mean-model Newton-Raphson".into(),
            });
        }
        let mut delta = 0.0_f64;
        for k in 0..2 {
            delta = delta.max(change(next.alpha[k], zero_fit.alpha[k]));
            if let Some(prev) = beta {
                delta = delta.max(change(beta_fit.beta[k], prev[k]));
            }
        }
        if beta.is_none() {
            delta = f64::INFINITY;
        }
        zero_fit = next;
        beta = Some(beta_fit.beta);
        if delta < ES_TOL {
            return Ok(es_result(zero_fit, beta_fit.beta, true, iteration));
        }
    }
    Ok(es_result(
        zero_fit,
        beta.expect("at least one iteration"),
        false,
        ES_MAX_ITER,
    ))
}

fn es_result(zero_fit: ZeroModelFit, beta: [f64; 2], converged: bool, iterations: usize) -> EsFit {
    EsFit {
        alpha_hat: zero_fit.alpha,
        p_hat: zero_fit.p,
        beta_hat: beta,
        converged,
        iterations,
        degenerate: zero_fit.boundary,
    }
}

/// Robust covariance of `sqrt(N) (beta_hat - beta)`: `A^{-1} V A^{-1}` with
/// `A`, `V` averaged over clusters.
pub fn sandwich_variance(
    data: &TrialDataset,
    beta_hat: [f64; 2],
    p_hat: [f64; 2],
) -> Result<Matrix2<f64>> {
    sandwich_from_summaries(&summarize(data), beta_hat, p_hat)
}

fn sandwich_from_summaries(
    summaries: &[ClusterSummary],
    beta_hat: [f64; 2],
    p_hat: [f64; 2],
) -> Result<Matrix2<f64>> {
    let weight = |arm: usize, mu: f64| 1.0 / (1.0 + zero_odds(p_hat[arm]) * mu);
    sandwich_with_weights(summaries, beta_hat, weight)
}

fn sandwich_with_weights<F: Fn(usize, f64) -> f64>(
    summaries: &[ClusterSummary],
    beta_hat: [f64; 2],
    weight: F,
) -> Result<Matrix2<f64>> {
    let n = summaries.len() as f64;
    let beta = Vector2::from(beta_hat);
    let mut bread = Matrix2::zeros();
    let mut meat = Matrix2::zeros();
    for s in summaries {
        let arm = s.arm as usize;
        let z = design_row(arm);
        let zz = z * z.transpose();
        let mu = z.dot(&beta).exp();
        let w = weight(arm, mu);
        let m = s.size as f64;
        let residual_sum = s.total as f64 - m * mu;
        bread += zz * (m * mu * w);
        meat += zz * (w * w * residual_sum * residual_sum);
    }
    let bread_inv = (bread / n)
        .try_inverse()
        .ok_or_else(|| Error::Estimation("singular A_N; both arms need data".into()))?;
    let sigma = bread_inv * (meat / n) * bread_inv;
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Leave-one-cluster-out covariance of `beta_hat`:
/// `(N - 2)/N * sum_i (b_(-i) - b)(b_(-i) - b)'`.
pub fn jackknife_variance(data: &TrialDataset) -> Result<Matrix2<f64>> {
    let summaries = summarize(data);
    let totals = Totals::from_summaries(&summaries);
    let full = es_from_totals(&totals, None)?;
    jackknife_from(&summaries, &totals, &full)
}

fn jackknife_from(
    summaries: &[ClusterSummary],
    totals: &Totals,
    full: &EsFit,
) -> Result<Matrix2<f64>> {
    let n = summaries.len();
    if n < 3 {
        return Err(Error::InsufficientClusters(format!(
            "jackknife needs at least 3 clusters, got {n}"
        )));
    }
    let center = Vector2::from(full.beta_hat);
    let mut acc = Matrix2::zeros();
    for s in summaries {
        let loo = totals.without(s);
        if loo.0[s.arm as usize].clusters == 0 {
            return Err(Error::Estimation(format!(
                "dropping cluster {} empties arm {}",
                s.cluster_id, s.arm
            )));
        }
        let refit = match es_from_totals(&loo, Some(full)) {
            Ok(fit) if fit.converged => fit,
            _ => {
                let retry = es_from_totals(&loo, None).map_err(|e| {
                    Error::Estimation(format!(
                        "leave-out fit without cluster {}: {e}",
                        s.cluster_id
                    ))
                })?;
                if !retry.converged {
                    return Err(Error::NonConvergence {
                        iterations: retry.iterations,
                        context: format!("leave-out fit without cluster {}", s.cluster_id),
                    });
                }
                retry
            }
        };
        let d = Vector2::from(refit.beta_hat) - center;
        acc += d * d.transpose();
    }
    Ok(acc * ((n as f64 - 2.0) / n as f64))
}

/// Critical-value reference for the Wald test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestReference {
    Normal,
    StudentT { df: u32 },
}

impl TestReference {
    pub fn critical_value(&self, alpha_level: f64) -> Result<f64> {
        let prob = 1.0 - alpha_level / 2.0;
        match *self {
            TestReference::Normal => normal_quantile(prob),
            TestReference::StudentT { df } => t_quantile(prob, df),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    /// `sqrt(N) beta2_hat / sigma2_hat`.
    pub statistic: f64,
    pub reference: TestReference,
    pub critical_value: f64,
    pub reject: bool,
    pub alpha_level: f64,
}

impl WaldTest {
    /// Rejects when `|statistic|` strictly exceeds the `1 - alpha/2` quantile.
    pub fn from_statistic(
        statistic: f64,
        reference: TestReference,
        alpha_level: f64,
    ) -> Result<Self> {
        let critical_value = reference.critical_value(alpha_level)?;
        Ok(Self {
            statistic,
            reference,
            critical_value,
            reject: statistic.abs() > critical_value,
            alpha_level,
        })
    }
}

/// Two-sided Wald test of `beta2 = 0`. `sigma2_sq_hat` is the estimated
/// variance of `sqrt(N) beta2_hat`.
pub fn wald_test(
    beta2_hat: f64,
    sigma2_sq_hat: f64,
    n_clusters: usize,
    reference: TestReference,
    alpha_level: f64,
) -> Result<WaldTest> {
    if sigma2_sq_hat.is_nan() || sigma2_sq_hat <= 0.0 {
        return Err(Error::Domain(format!(
            "variance estimate {sigma2_sq_hat} must be positive"
        )));
    }
    let statistic = (n_clusters as f64).sqrt() * beta2_hat / sigma2_sq_hat.sqrt();
    WaldTest::from_statistic(statistic, reference, alpha_level)
}

/// Full fit: expectation-solution estimates plus both variance estimators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeeFit {
    pub beta_hat: [f64; 2],
    pub alpha_hat: [f64; 2],
    pub p_hat: [f64; 2],
    /// Sandwich covariance of `sqrt(N) (beta_hat - beta)`.
    pub sigma_naive: [[f64; 2]; 2],
    /// Jackknife covariance of `beta_hat`.
    pub sigma_jackknife: [[f64; 2]; 2],
    pub n_clusters: usize,
    pub converged: bool,
    pub iterations: usize,
    pub degenerate: bool,
}

fn to_array(m: Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

pub fn fit_gee(data: &TrialDataset) -> Result<GeeFit> {
    fit_gee_summaries(&summarize(data))
}

/// Same as [`fit_gee`] on pre-computed cluster summaries.
pub fn fit_gee_summaries(summaries: &[ClusterSummary]) -> Result<GeeFit> {
    let totals = Totals::from_summaries(summaries);
    let es = es_from_totals(&totals, None)?;
    let naive = sandwich_from_summaries(summaries, es.beta_hat, es.p_hat)?;
    let jack = jackknife_from(summaries, &totals, &es)?;
    Ok(GeeFit {
        beta_hat: es.beta_hat,
        alpha_hat: es.alpha_hat,
        p_hat: es.p_hat,
        sigma_naive: to_array(naive),
        sigma_jackknife: to_array(jack),
        n_clusters: summaries.len(),
        converged: es.converged,
        iterations: es.iterations,
        degenerate: es.degenerate,
    })
}

impl GeeFit {
    /// Sandwich estimate of the variance of `sqrt(N) beta2_hat`.
    pub fn naive_sigma2_sq(&self) -> f64 {
        self.sigma_naive[1][1]
    }

    /// Jackknife estimate on the same `sqrt(N)` scale.
    pub fn jackknife_sigma2_sq(&self) -> f64 {
        self.n_clusters as f64 * self.sigma_jackknife[1][1]
    }

    pub fn naive_se(&self) -> [f64; 2] {
        let n = self.n_clusters as f64;
        [
            (self.sigma_naive[0][0] / n).sqrt(),
            (self.sigma_naive[1][1] / n).sqrt(),
        ]
    }

    pub fn jackknife_se(&self) -> [f64; 2] {
        [
            self.sigma_jackknife[0][0].sqrt(),
            self.sigma_jackknife[1][1].sqrt(),
        ]
    }

    pub fn wald_naive(&self, reference: TestReference, alpha_level: f64) -> Result<WaldTest> {
        wald_test(
            self.beta_hat[1],
            self.naive_sigma2_sq(),
            self.n_clusters,
            reference,
            alpha_level,
        )
    }

    pub fn wald_jackknife(&self, reference: TestReference, alpha_level: f64) -> Result<WaldTest> {
        wald_test(
            self.beta_hat[1],
            self.jackknife_sigma2_sq(),
            self.n_clusters,
            reference,
            alpha_level,
        )
    }

    /// `parameter,estimate,naive_se,jackknife_se` rows.
    pub fn summary_table(&self) -> String {
        let naive = self.naive_se();
        let jack = self.jackknife_se();
        let mut out = String::from("parameter,estimate,naive_se,jackknife_se\n");
        for k in 0..2 {
            out.push_str(&format!(
                "beta{},{},{},{}\n",
                k + 1,
                self.beta_hat[k],
                naive[k],
                jack[k]
            ));
        }
        for k in 0..2 {
            out.push_str(&format!("alpha{},{},,\n", k + 1, self.alpha_hat[k]));
        }
        for k in 0..2 {
            out.push_str(&format!("p{},{},,\n", k + 1, self.p_hat[k]));
        }
        out
    }
}
