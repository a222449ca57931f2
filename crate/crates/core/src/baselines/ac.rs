//! Activation clustering: two-means on a PCA projection of the class, with
//! the relative size of the smaller cluster as the decision statistic.

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KMeansParams};
use crate::data::{ClassId, ClassView};
use crate::detector::{check_theta, ClassScores, Detector, FlagRule, Method, ReferenceSet};
use crate::dimred::pca_reduce;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcConfig {
    pub target_dim: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for AcConfig {
    fn default() -> Self {
        AcConfig {
            target_dim: 2,
            restarts: 50,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcAnalysis {
    pub class: ClassId,
    pub ids: Vec<u64>,
    /// Two-means assignment per sample, 0 or 1.
    pub labels: Vec<usize>,
    pub sizes: [usize; 2],
    pub ratio: f64,
    /// Clusters reported as poisoned when the ratio is below threshold.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcVerdict {
    pub class: ClassId,
    pub sizes: [usize; 2],
    pub ratio: f64,
    pub theta: f64,
    pub poisoned: bool,
    pub detected_poison_ids: Vec<u64>,
}

/// `min(a, b) / (a + b)`.
pub fn size_ratio(sizes: [usize; 2]) -> f64 {
    let total = sizes[0] + sizes[1];
    if total == 0 {
        return 0.0;
    }
    sizes[0].min(sizes[1]) as f64 / total as f64
}

/// Clusters reported as poisoned below threshold: the smaller one, or both
/// when the sizes are equal.
fn flagged_clusters(sizes: [usize; 2]) -> Vec<usize> {
    match sizes[0].cmp(&sizes[1]) {
        std::cmp::Ordering::Less => vec![0],
        std::cmp::Ordering::Greater => vec![1],
        std::cmp::Ordering::Equal => vec![0, 1],
    }
}

pub fn ac_analyze(view: &ClassView<'_>, cfg: &AcConfig, seed: u64) -> Result<AcAnalysis> {
    let n = view.len();
    if n < 2 {
        return Err(Error::domain(format!(
            "class {} has {} samples; two-means needs at least 2",
            view.class, n
        )));
    }
    let x = view.matrix();
    let ids = view.ids();
    let degenerate = x.rows().into_iter().all(|r| r == x.row(0));
    if degenerate {
        log::warn!("class {}: all samples identical; ratio set to 0", view.class);
        return Ok(AcAnalysis {
            class: view.class,
            ids,
            labels: vec![0; n],
            sizes: [n, 0],
            ratio: 0.0,
            flagged: vec![1],
        });
    }
    let dim = cfg.target_dim.min(x.ncols()).min(n);
    let projected = pca_reduce(&x, dim)?.embedding;
    let fit = kmeans(
        &projected,
        &KMeansParams {
            k: 2,
            restarts: cfg.restarts,
            max_iter: cfg.max_iter,
        },
        seed,
    )?;
    let s = fit.sizes();
    let sizes = [s[0], s[1]];
    Ok(AcAnalysis {
        class: view.class,
        ids,
        labels: fit.labels,
        sizes,
        ratio: size_ratio(sizes),
        flagged: flagged_clusters(sizes),
    })
}

impl AcAnalysis {
    pub fn scores(&self) -> ClassScores {
        let rules = self
            .labels
            .iter()
            .map(|&l| {
                if self.flagged.contains(&l) {
                    FlagRule::RatioBelow(self.ratio)
                } else {
                    FlagRule::Never
                }
            })
            .collect();
        ClassScores {
            class: self.class,
            ids: self.ids.clone(),
            rules,
        }
    }

    pub fn verdict(&self, theta: f64) -> Result<AcVerdict> {
        check_theta(theta)?;
        let poisoned = self.ratio < theta;
        let detected_poison_ids = if poisoned {
            self.ids
                .iter()
                .zip(&self.labels)
                .filter(|(_, l)| self.flagged.contains(l))
                .map(|(id, _)| *id)
                .collect()
        } else {
            Vec::new()
        };
        Ok(AcVerdict {
            class: self.class,
            sizes: self.sizes,
            ratio: self.ratio,
            theta,
            poisoned,
            detected_poison_ids,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ActivationClustering {
    pub cfg: AcConfig,
}

impl Detector for ActivationClustering {
    fn method(&self) -> Method {
        Method::Ac
    }

    fn score_class(
        &self,
        view: &ClassView<'_>,
        _reference: &ReferenceSet,
        seed: u64,
    ) -> Result<ClassScores> {
        Ok(ac_analyze(view, &self.cfg, seed)?.scores())
    }
}
