//! Cluster inspection by input filtering: a mixture model partitions the
//! reduced class, and each component is scored by how often an averaging
//! filter changes the model's decision on its members.

use serde::{Deserialize, Serialize};

use super::gmm::{gmm_bic_cluster, GmmParams};
use crate::data::{ClassId, ClassView};
use crate::detector::{check_theta, ClassScores, Detector, FlagRule, Method, ReferenceSet};
use crate::dimred::{reduce, ReductionConfig};
use crate::error::{Error, Result};

/// Mass of the smoothed reference distribution on "prediction changed".
pub const KL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiConfig {
    pub reduction: ReductionConfig,
    pub k_max: usize,
    pub restarts: usize,
}

impl Default for CiConfig {
    fn default() -> Self {
        CiConfig::new(ReductionConfig::default())
    }
}

impl CiConfig {
    pub fn new(reduction: ReductionConfig) -> Self {
        CiConfig {
            reduction,
            k_max: GmmParams::default().k_max,
            restarts: GmmParams::default().restarts,
        }
    }
}

/// KL((1-p, p) || (1-eps, eps)), with exact agreement mapped to zero.
pub fn kl_score(p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    let q = 1.0 - p;
    let head = if q > 0.0 { q * (q / (1.0 - KL_EPS)).ln() } else { 0.0 };
    head + p * (p / KL_EPS).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiVerdict {
    pub class: ClassId,
    pub cluster: usize,
    pub size: usize,
    pub disagreement: f64,
    pub kl: f64,
    /// KL threshold equivalent to the unit-interval threshold `theta`.
    pub kl_threshold: f64,
    pub theta: f64,
    pub poisoned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiAnalysis {
    pub class: ClassId,
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub disagreement: Vec<f64>,
}

impl CiAnalysis {
    pub fn scores(&self) -> ClassScores {
        ClassScores {
            class: self.class,
            ids: self.ids.clone(),
            rules: self
                .labels
                .iter()
                .map(|&l| FlagRule::ScoreAtLeast(self.disagreement[l]))
                .collect(),
        }
    }

    /// A cluster is poisoned when its disagreement rate reaches `1 - theta`,
    /// equivalently when its KL score reaches `kl_score(1 - theta)`.
    pub fn verdicts(&self, theta: f64) -> Result<Vec<CiVerdict>> {
        check_theta(theta)?;
        let kl_threshold = kl_score(1.0 - theta);
        Ok(self
            .disagreement
            .iter()
            .enumerate()
            .map(|(k, &p)| CiVerdict {
                class: self.class,
                cluster: k,
                size: self.labels.iter().filter(|&&l| l == k).count(),
                disagreement: p,
                kl: kl_score(p),
                kl_threshold,
                theta,
                poisoned: FlagRule::ScoreAtLeast(p).flagged(theta),
            })
            .collect())
    }
}

/// Per-cluster disagreement between filtered and unfiltered predictions.
pub fn ci_disagreement(
    labels: &[usize],
    num_clusters: usize,
    filtered: &[ClassId],
    unfiltered: &[ClassId],
) -> Result<Vec<f64>> {
    if labels.len() != filtered.len() || labels.len() != unfiltered.len() {
        return Err(Error::domain("cluster labels and predictions differ in length"));
    }
    let mut changed = vec![0usize; num_clusters];
    let mut sizes = vec![0usize; num_clusters];
    for ((&l, f), u) in labels.iter().zip(filtered).zip(unfiltered) {
        if l >= num_clusters {
            return Err(Error::domain(format!("cluster label {} out of range", l)));
        }
        sizes[l] += 1;
        changed[l] += usize::from(f != u);
    }
    Ok(changed
        .iter()
        .zip(&sizes)
        .map(|(&c, &s)| if s == 0 { 0.0 } else { c as f64 / s as f64 })
        .collect())
}

pub fn ci_analyze(
    view: &ClassView<'_>,
    reference: &ReferenceSet,
    cfg: &CiConfig,
    seed: u64,
) -> Result<CiAnalysis> {
    let filtered = view
        .samples
        .iter()
        .map(|s| {
            s.filtered_prediction.ok_or_else(|| {
                Error::config(format!(
                    "sample {} has no filtered prediction; CI cannot run",
                    s.id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = reference.head();
    let unfiltered = view
        .samples
        .iter()
        .map(|s| head.classify_f32(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let n = view.len();
    let (labels, num_clusters) = if n <= 2 {
        (vec![0; n], usize::from(n > 0))
    } else {
        let mut reduction = cfg.reduction.with_seed(seed);
        reduction.n_neighbors = reduction.n_neighbors.min(n - 1);
        let y = reduce(&view.matrix(), &reduction)?;
        let mut params = GmmParams {
            k_max: cfg.k_max,
            restarts: cfg.restarts,
            ..GmmParams::default()
        };
        if params.k_max >= n {
            log::warn!("class {}: K_max lowered to {}", view.class, n - 1);
            params.k_max = n - 1;
        }
        let sel = gmm_bic_cluster(&y, &params, seed)?;
        (sel.labels, sel.num_clusters)
    };
    let disagreement = ci_disagreement(&labels, num_clusters, &filtered, &unfiltered)?;
    Ok(CiAnalysis {
        class: view.class,
        ids: view.ids(),
        labels,
        disagreement,
    })
}

#[derive(Clone, Debug, Default)]
pub struct CleanseInspection {
    pub cfg: CiConfig,
}

impl Detector for CleanseInspection {
    fn method(&self) -> Method {
        Method::Ci
    }

    fn score_class(
        &self,
        view: &ClassView<'_>,
        reference: &ReferenceSet,
        seed: u64,
    ) -> Result<ClassScores> {
        Ok(ci_analyze(view, reference, &self.cfg, seed)?.scores())
    }
}
