//! Correlated ZIP trial data.
//!
//! Each subject's outcome is `y = (1 - s) * u` where `s` is an exchangeable
//! structural-zero indicator with marginal `p` and ICC `rho_s`, and `u` is a
//! Poisson(`lambda`) count built from a cluster-shared component so that
//! `Corr(u_j, u_j') = rho_u`.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{ClusterSizeKind, ClusterSizeModel, DesignInputs};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const MAX_REJECTIONS: usize = 1_000_000;
const ALLOCATION_STREAM: u64 = u64::MAX;

/// One cluster: its arm (0 control, 1 intervention) and subject outcomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterRecord {
    pub cluster_id: u64,
    pub arm: u8,
    pub outcomes: Vec<u32>,
}

/// A simulated or ingested trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialDataset {
    clusters: Vec<ClusterRecord>,
    /// Root seed when the data were simulated.
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectRow {
    cluster_id: u64,
    arm: u8,
    y: u32,
}

impl TrialDataset {
    pub fn new(clusters: Vec<ClusterRecord>, seed: Option<u64>) -> Result<Self> {
        for c in &clusters {
            if c.arm > 1 {
                return Err(Error::Dataset(format!(
                    "cluster {} has arm {}; expected 0 or 1",
                    c.cluster_id, c.arm
                )));
            }
            if c.outcomes.is_empty() {
                return Err(Error::Dataset(format!(
                    "cluster {} has no subjects",
                    c.cluster_id
                )));
            }
        }
        Ok(Self { clusters, seed })
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.clusters.iter().map(|c| c.outcomes.len()).sum()
    }

    /// Writes `cluster_id,arm,y` rows, one per subject, LF-terminated.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        for c in &self.clusters {
            for &y in &c.outcomes {
                out.serialize(SubjectRow {
                    cluster_id: c.cluster_id,
                    arm: c.arm,
                    y,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the subject-per-row format. Clusters keep the order of their
    /// first row; an arm that changes within a cluster is an error.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = input.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["cluster_id", "arm", "y"] {
            return Err(Error::Dataset(format!(
                "expected header `cluster_id,arm,y`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut clusters: Vec<ClusterRecord> = Vec::new();
        for (line, row) in input.deserialize::<SubjectRow>().enumerate() {
            let row = row.map_err(|e| Error::Dataset(format!("row {}: {e}", line + 2)))?;
            match index.get(&row.cluster_id) {
                Some(&i) => {
                    let c = &mut clusters[i];
                    if c.arm != row.arm {
                        return Err(Error::Dataset(format!(
                            "cluster {} switches arm from {} to {} at row {}",
                            row.cluster_id,
                            c.arm,
                            row.arm,
                            line + 2
                        )));
                    }
                    c.outcomes.push(row.y);
                }
                None => {
                    index.insert(row.cluster_id, clusters.len());
                    clusters.push(ClusterRecord {
                        cluster_id: row.cluster_id,
                        arm: row.arm,
                        outcomes: vec![row.y],
                    });
                }
            }
        }
        if clusters.is_empty() {
            return Err(Error::Dataset("no subject rows".into()));
        }
        Self::new(clusters, None)
    }
}

/// Draws a cluster size. Truncated Poisson uses rejection of out-of-range
/// Poisson draws.
pub fn sample_cluster_size<R: Rng + ?Sized>(model: &ClusterSizeModel, rng: &mut R) -> Result<u32> {
    match model.kind() {
        ClusterSizeKind::Fixed { m } => Ok(m),
        ClusterSizeKind::DiscreteUniform { lo, hi } => Ok(rng.random_range(lo..=hi)),
        ClusterSizeKind::TruncatedPoisson { rate, lo, hi } => {
            let dist = Poisson::new(rate)
                .map_err(|e| Error::Configuration(format!("Poisson({rate}): {e}")))?;
            for _ in 0..MAX_REJECTIONS {
                let k = dist.sample(rng);
                if k >= lo as f64 && k <= hi as f64 {
                    return Ok(k as u32);
                }
            }
            Err(Error::Configuration(format!(
                "truncated Poisson({rate}) on [{lo}, {hi}] rejected {MAX_REJECTIONS} draws"
            )))
        }
    }
}

/// Exchangeable binary vector with marginal `p` and pairwise correlation
/// `rho_s`: each entry copies a cluster-level Bernoulli(`p`) draw with
/// probability `sqrt(rho_s)` and is an independent Bernoulli(`p`) otherwise.
pub fn sample_structural_zeros<R: Rng + ?Sized>(
    m: usize,
    p: f64,
    rho_s: f64,
    rng: &mut R,
) -> Vec<bool> {
    if p == 0.0 {
        return vec![false; m];
    }
    let shared = rng.random_bool(p);
    let copy_prob = rho_s.sqrt();
    (0..m)
        .map(|_| {
            if rng.random_bool(copy_prob) {
                shared
            } else {
                rng.random_bool(p)
            }
        })
        .collect()
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    // Parameters are validated upstream; a positive finite mean is accepted.
    let dist = Poisson::new(mean).expect("positive finite Poisson mean");
    dist.sample(rng) as u32
}

/// Poisson(`lambda`) counts sharing a cluster-level component:
/// `u_j = v_j + v*`, `v_j ~ Poisson(lambda (1 - rho_u))`, `v* ~ Poisson(lambda rho_u)`.
pub fn sample_correlated_poisson<R: Rng + ?Sized>(
    m: usize,
    lambda: f64,
    rho_u: f64,
    rng: &mut R,
) -> Vec<u32> {
    let shared = poisson_draw(lambda * rho_u, rng);
    let own_mean = lambda * (1.0 - rho_u);
    if own_mean <= 0.0 {
        return vec![shared; m];
    }
    let own = Poisson::new(own_mean).expect("positive finite Poisson mean");
    (0..m).map(|_| shared + own.sample(rng) as u32).collect()
}

/// How clusters are assigned to arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Allocation {
    /// `round(N r_bar)` intervention clusters (an exact half is broken by a
    /// seeded coin), assigned by a seeded shuffle.
    #[default]
    Balanced,
    /// Each cluster independently Bernoulli(`r_bar`).
    Bernoulli,
}

fn allocate(n: usize, r_bar: f64, allocation: Allocation, seed: u64) -> Result<Vec<u8>> {
    let mut rng = stream_rng(seed, ALLOCATION_STREAM);
    let arms = match allocation {
        Allocation::Balanced => {
            let target = n as f64 * r_bar;
            let floor = target.floor();
            let frac = target - floor;
            let n_int = if frac == 0.5 {
                floor as usize + usize::from(rng.random_bool(0.5))
            } else {
                target.round() as usize
            };
            let mut arms: Vec<u8> = (0..n).map(|i| u8::from(i < n_int)).collect();
            arms.shuffle(&mut rng);
            arms
        }
        Allocation::Bernoulli => (0..n).map(|_| u8::from(rng.random_bool(r_bar))).collect(),
    };
    let treated = arms.iter().filter(|&&a| a == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::Configuration(format!(
            "allocation of {n} clusters with r_bar = {r_bar} leaves an arm empty"
        )));
    }
    Ok(arms)
}

/// Simulates a trial with balanced allocation.
pub fn generate_trial(design: &DesignInputs, n_clusters: usize, seed: u64) -> Result<TrialDataset> {
    generate_trial_with(design, n_clusters, seed, Allocation::Balanced)
}

pub fn generate_trial_with(
    design: &DesignInputs,
    n_clusters: usize,
    seed: u64,
    allocation: Allocation,
) -> Result<TrialDataset> {
    let clusters = generate_latent_with(design, n_clusters, seed, allocation)?
        .into_iter()
        .map(|c| ClusterRecord {
            cluster_id: c.cluster_id,
            arm: c.arm,
            outcomes: c.outcomes(),
        })
        .collect();
    TrialDataset::new(clusters, Some(seed))
}

/// Latent components behind one simulated cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentCluster {
    pub cluster_id: u64,
    pub arm: u8,
    pub structural: Vec<bool>,
    pub poisson: Vec<u32>,
}

impl LatentCluster {
    /// `y = (1 - s) u`.
    pub fn outcomes(&self) -> Vec<u32> {
        self.structural
            .iter()
            .zip(&self.poisson)
            .map(|(&s, &u)| if s { 0 } else { u })
            .collect()
    }
}

/// Same draws as [`generate_trial`], keeping the latent indicators and counts.
pub fn generate_latent(
    design: &DesignInputs,
    n_clusters: usize,
    seed: u64,
) -> Result<Vec<LatentCluster>> {
    generate_latent_with(design, n_clusters, seed, Allocation::Balanced)
}

pub fn generate_latent_with(
    design: &DesignInputs,
    n_clusters: usize,
    seed: u64,
    allocation: Allocation,
) -> Result<Vec<LatentCluster>> {
    if n_clusters < 2 {
        return Err(Error::Configuration(format!(
            "need at least two clusters, got {n_clusters}"
        )));
    }
    let arms = allocate(n_clusters, design.r_bar(), allocation, seed)?;
    arms.into_par_iter()
        .enumerate()
        .map(|(i, arm)| simulate_cluster(design, i as u64, arm, seed))
        .collect()
}

fn simulate_cluster(
    design: &DesignInputs,
    cluster_id: u64,
    arm: u8,
    seed: u64,
) -> Result<LatentCluster> {
    let mut rng = stream_rng(seed, cluster_id);
    let profile = design.arm(arm);
    let m = sample_cluster_size(design.cluster_sizes(), &mut rng)? as usize;
    let structural = sample_structural_zeros(m, profile.p(), design.rho_s(), &mut rng);
    let poisson = sample_correlated_poisson(m, profile.lambda(), design.rho_u(), &mut rng);
    Ok(LatentCluster {
        cluster_id,
        arm,
        structural,
        poisson,
    })
}
