//! Cluster-then-characterise detection: each dense cluster of a class is
//! summarised by how far its centroid sits from the benign class mean, and
//! that offset is replayed on benign samples of other classes.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassView, FeatureDataset, FeatureSample};
use crate::dbscan::{cluster_class, ClusterPartition, DbscanParams};
use crate::detector::{
    check_theta, derive_seed, ClassScores, Detector, FlagRule, Method, ReferenceSet,
};
use crate::dimred::ReductionConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PcdConfig {
    pub reduction: ReductionConfig,
    pub dbscan: DbscanParams,
}

/// Mean feature vector of a cluster.
pub fn cluster_centroid(members: &[&FeatureSample]) -> Result<Vec<f64>> {
    let first = members
        .first()
        .ok_or_else(|| Error::domain("centroid of an empty cluster"))?;
    let d = first.features.len();
    let mut acc = vec![0.0f64; d];
    for s in members {
        if s.features.len() != d {
            return Err(Error::domain("cluster members differ in feature width"));
        }
        for (a, &v) in acc.iter_mut().zip(&s.features) {
            *a += v as f64;
        }
    }
    let n = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Offset of a cluster centroid from the benign validation mean of `class`.
pub fn deviation_vector(
    centroid: &[f64],
    class: ClassId,
    reference: &ReferenceSet,
) -> Result<Vec<f64>> {
    let mean = reference.class_mean(class)?;
    if mean.len() != centroid.len() {
        return Err(Error::domain(format!(
            "centroid has width {}, reference has {}",
            centroid.len(),
            mean.len()
        )));
    }
    Ok(centroid.iter().zip(mean).map(|(c, m)| c - m).collect())
}

/// Fraction of benign validation samples from classes other than `class`
/// that the head assigns to `class` once `beta` is added to their features
/// (negative coordinates clipped to zero).
pub fn misclassification_ratio(
    beta: &[f64],
    class: ClassId,
    reference: &ReferenceSet,
) -> Result<f64> {
    let head = reference.head();
    if beta.len() != head.input_dim() {
        return Err(Error::domain(format!(
            "deviation has width {}, head expects {}",
            beta.len(),
            head.input_dim()
        )));
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("deviation vector is not finite"));
    }
    let (hits, total) = reference
        .features()
        .par_iter()
        .zip(reference.labels().par_iter())
        .filter(|(_, &label)| label != class)
        .map(|(f, _)| {
            let shifted: Vec<f64> = f.iter().zip(beta).map(|(a, b)| (a + b).max(0.0)).collect();
            (usize::from(head.classify_unchecked(&shifted) == class), 1usize)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(Error::domain(format!(
            "no validation samples outside class {}",
            class
        )));
    }
    Ok(hits as f64 / total as f64)
}

/// A cluster is poisoned when its misclassification ratio reaches `1 - theta`.
pub fn judge_cluster(mr: f64, theta: f64) -> Result<bool> {
    check_theta(theta)?;
    if !(0.0..=1.0).contains(&mr) {
        return Err(Error::domain(format!("misclassification ratio {} outside [0, 1]", mr)));
    }
    Ok(FlagRule::ScoreAtLeast(mr).flagged(theta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAnalysis {
    pub cluster: usize,
    pub member_ids: Vec<u64>,
    pub centroid: Vec<f64>,
    pub deviation: Vec<f64>,
    pub mr: f64,
}

#[derive(Clone, Debug)]
pub struct ClassAnalysis {
    pub class: ClassId,
    pub partition: ClusterPartition,
    pub clusters: Vec<ClusterAnalysis>,
    /// Low-dimensional embedding, absent when the class was too small to
    /// reduce.
    pub embedding: Option<Array2<f64>>,
}

/// Per-cluster verdict, one JSON line per cluster in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterVerdict {
    pub class: ClassId,
    pub cluster: usize,
    pub size: usize,
    pub mr: f64,
    pub theta: f64,
    pub poisoned: bool,
    pub centroid: Vec<f64>,
    pub deviation: Vec<f64>,
}

impl ClassAnalysis {
    pub fn scores(&self) -> ClassScores {
        let rules = self
            .partition
            .assignment
            .iter()
            .map(|a| match a {
                None => FlagRule::Always,
                Some(k) => FlagRule::ScoreAtLeast(self.clusters[*k].mr),
            })
            .collect();
        ClassScores {
            class: self.class,
            ids: self.partition.ids.clone(),
            rules,
        }
    }

    pub fn verdicts(&self, theta: f64) -> Vec<ClusterVerdict> {
        self.clusters
            .iter()
            .map(|c| ClusterVerdict {
                class: self.class,
                cluster: c.cluster,
                size: c.member_ids.len(),
                mr: c.mr,
                theta,
                poisoned: FlagRule::ScoreAtLeast(c.mr).flagged(theta),
                centroid: c.centroid.clone(),
                deviation: c.deviation.clone(),
            })
            .collect()
    }
}

/// Clusters one class and scores every cluster against the reference set.
pub fn analyze_class(
    view: &ClassView<'_>,
    reference: &ReferenceSet,
    cfg: &PcdConfig,
    seed: u64,
) -> Result<ClassAnalysis> {
    cfg.dbscan.validate()?;
    if view.is_empty() {
        return Err(Error::domain(format!("class {} has no samples", view.class)));
    }
    if view.len() < cfg.dbscan.min_pts {
        log::warn!(
            "class {} has {} samples, fewer than min_pts {}; every sample is an outlier",
            view.class,
            view.len(),
            cfg.dbscan.min_pts
        );
        return Ok(ClassAnalysis {
            class: view.class,
            partition: ClusterPartition {
                ids: view.ids(),
                assignment: vec![None; view.len()],
                num_clusters: 0,
            },
            clusters: Vec::new(),
            embedding: None,
        });
    }
    let mut reduction = cfg.reduction.clone().with_seed(seed);
    if reduction.n_neighbors >= view.len() {
        log::warn!(
            "class {}: n_neighbors {} lowered to {}",
            view.class,
            reduction.n_neighbors,
            view.len() - 1
        );
        reduction.n_neighbors = view.len() - 1;
    }
    let clustering = cluster_class(view, &reduction, &cfg.dbscan)?;
    let partition = clustering.partition;
    if partition.num_clusters == 0 {
        log::warn!(
            "class {}: no dense cluster found; the whole class is flagged",
            view.class
        );
    }
    let clusters = (0..partition.num_clusters)
        .map(|k| {
            let members: Vec<&FeatureSample> = partition
                .members(k)
                .into_iter()
                .map(|p| view.samples[p])
                .collect();
            let centroid = cluster_centroid(&members)?;
            let deviation = deviation_vector(&centroid, view.class, reference)?;
            let mr = misclassification_ratio(&deviation, view.class, reference)?;
            Ok(ClusterAnalysis {
                cluster: k,
                member_ids: members.iter().map(|s| s.id).collect(),
                centroid,
                deviation,
                mr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassAnalysis {
        class: view.class,
        partition,
        clusters,
        embedding: Some(clustering.embedding),
    })
}

/// Analyses every class of `train`, in parallel over classes.
pub fn analyze(
    train: &FeatureDataset,
    reference: &ReferenceSet,
    cfg: &PcdConfig,
    seed: u64,
) -> Result<Vec<ClassAnalysis>> {
    if train.num_classes() != reference.num_classes() {
        return Err(Error::config(format!(
            "training data has {} classes, reference has {}",
            train.num_classes(),
            reference.num_classes()
        )));
    }
    reference.require_all_classes()?;
    (0..train.num_classes())
        .into_par_iter()
        .map(|c| {
            let view = train.class_subset(c)?;
            analyze_class(&view, reference, cfg, derive_seed(seed, c as u64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class: ClassId,
    pub poisoned: BTreeSet<u64>,
    pub benign: BTreeSet<u64>,
    pub outliers: Vec<u64>,
    pub outlier_ratio: f64,
    pub verdicts: Vec<ClusterVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub theta: f64,
    pub classes: Vec<ClassDetection>,
}

impl DetectionResult {
    pub fn from_analyses(analyses: &[ClassAnalysis], theta: f64) -> Result<Self> {
        check_theta(theta)?;
        let classes = analyses
            .iter()
            .map(|a| {
                let (poisoned, benign) = a.scores().judge(theta);
                ClassDetection {
                    class: a.class,
                    poisoned,
                    benign,
                    outliers: a.partition.outlier_ids(),
                    outlier_ratio: a.partition.outlier_ratio(),
                    verdicts: a.verdicts(theta),
                }
            })
            .collect();
        Ok(DetectionResult { theta, classes })
    }

    pub fn all_poisoned(&self) -> BTreeSet<u64> {
        self.classes.iter().flat_map(|c| c.poisoned.iter().copied()).collect()
    }
}

/// Runs the full pipeline at a fixed threshold.
pub fn detect(
    train: &FeatureDataset,
    reference: &ReferenceSet,
    cfg: &PcdConfig,
    theta: f64,
    seed: u64,
) -> Result<DetectionResult> {
    check_theta(theta)?;
    let analyses = analyze(train, reference, cfg, seed)?;
    DetectionResult::from_analyses(&analyses, theta)
}

#[derive(Clone, Debug, Default)]
pub struct Ccaud {
    pub cfg: PcdConfig,
}

impl Detector for Ccaud {
    fn method(&self) -> Method {
        Method::Ccaud
    }

    fn score_class(
        &self,
        view: &ClassView<'_>,
        reference: &ReferenceSet,
        seed: u64,
    ) -> Result<ClassScores> {
        Ok(analyze_class(view, reference, &self.cfg, seed)?.scores())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassifierHead, DenseLayer, Split};
    use proptest::prelude::*;

    fn identity_head(d: usize) -> ClassifierHead {
        let mut w = vec![0.0f32; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        ClassifierHead::new(vec![DenseLayer::new(d, d, w, vec![0.0; d]).unwrap()]).unwrap()
    }

    fn reference_3() -> ReferenceSet {
        // Three classes, one-hot-ish features with a margin of 2.
        let mut samples = Vec::new();
        let mut id = 0;
        for c in 0..3 {
            for j in 0..4 {
                let mut f = vec![0.5f32; 3];
                f[c] = 2.5 + 0.1 * j as f32;
                samples.push(FeatureSample::benign(id, f, c));
                id += 1;
            }
        }
        let ds = FeatureDataset::new(samples, 3, 3, Split::Validation).unwrap();
        ReferenceSet::new(&ds, &identity_head(3)).unwrap()
    }

    #[test]
    fn zero_deviation_gives_zero_mr() {
        let r = reference_3();
        for c in 0..3 {
            assert_eq!(misclassification_ratio(&[0.0; 3], c, &r).unwrap(), 0.0);
        }
    }

    #[test]
    fn strong_deviation_gives_full_mr() {
        let r = reference_3();
        let mr = misclassification_ratio(&[0.0, 0.0, 10.0], 2, &r).unwrap();
        assert_eq!(mr, 1.0);
        // Half of the way there flips nobody: 0.5 + 2 < 2.5.
        assert_eq!(misclassification_ratio(&[0.0, 0.0, 1.9], 2, &r).unwrap(), 0.0);
    }

    #[test]
    fn relu_clips_shifted_features() {
        // A large negative offset on class 0 coordinates zeroes them, after
        // which the tie-free winner is decided by the remaining coordinates.
        let r = reference_3();
        let mr = misclassification_ratio(&[-100.0, 0.0, 0.3], 2, &r).unwrap();
        // Class-0 samples: (0, 0.5, 0.8) -> class 2. Class-1 samples:
        // (0, 2.5+, 0.8) -> class 1.
        assert!((mr - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deviation_matches_long_hand() {
        let r = reference_3();
        let beta = deviation_vector(&[1.0, 1.0, 1.0], 1, &r).unwrap();
        // class 1 mean: (0.5, 2.65, 0.5)
        let expect = [0.5, 1.0 - 2.65, 0.5];
        for (a, b) in beta.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn centroid_of_members() {
        let a = FeatureSample::benign(0, vec![1.0, 2.0], 0);
        let b = FeatureSample::benign(1, vec![3.0, 6.0], 0);
        assert_eq!(cluster_centroid(&[&a, &b]).unwrap(), vec![2.0, 4.0]);
        assert!(cluster_centroid(&[]).is_err());
    }

    #[test]
    fn judge_threshold_edges() {
        assert!(judge_cluster(1.0, 0.0).unwrap());
        assert!(!judge_cluster(0.99, 0.0).unwrap());
        assert!(judge_cluster(0.0, 1.0).unwrap());
        assert!(judge_cluster(0.5, 0.5).unwrap());
        assert!(judge_cluster(0.5, 1.5).is_err());
        assert!(judge_cluster(-0.1, 0.5).is_err());
    }

    #[test]
    fn small_class_is_all_outliers() {
        let r = reference_3();
        let samples: Vec<_> = (0..5)
            .map(|i| FeatureSample::benign(i, vec![1.0, 0.0, 0.0], 0))
            .collect();
        let ds = FeatureDataset::new(samples, 3, 3, Split::Train).unwrap();
        let view = ds.class_subset(0).unwrap();
        let a = analyze_class(&view, &r, &PcdConfig::default(), 0).unwrap();
        assert_eq!(a.partition.num_clusters, 0);
        let (p, b) = a.scores().judge(0.0);
        assert_eq!(p.len(), 5);
        assert!(b.is_empty());
    }

    proptest! {
        #[test]
        fn flagged_set_grows_with_theta(mrs in proptest::collection::vec(0.0f64..=1.0, 1..8),
                                        t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            for mr in mrs {
                if judge_cluster(mr, lo).unwrap() {
                    prop_assert!(judge_cluster(mr, hi).unwrap());
                }
            }
        }
    }
}
