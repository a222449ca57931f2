use std::collections::{BTreeSet, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-based class index.
pub type ClassId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One sample's latent representation plus its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub id: u64,
    /// Post-ReLU latent vector, so every entry is nonnegative.
    pub features: Vec<f32>,
    pub label: ClassId,
    /// Ground truth, never visible to the detectors.
    pub is_poisoned: bool,
    /// Label before poisoning, when known.
    pub origin_label: Option<ClassId>,
    /// Full-model prediction on the average-filtered input (used by CI).
    pub filtered_prediction: Option<ClassId>,
}

impl FeatureSample {
    pub fn benign(id: u64, features: Vec<f32>, label: ClassId) -> Self {
        FeatureSample {
            id,
            features,
            label,
            is_poisoned: false,
            origin_label: None,
            filtered_prediction: None,
        }
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&x| x as f64).collect()
    }
}

/// A validated collection of feature samples from a single split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    samples: Vec<FeatureSample>,
    num_classes: usize,
    feature_dim: usize,
    split: Split,
}

impl FeatureDataset {
    pub fn new(
        samples: Vec<FeatureSample>,
        num_classes: usize,
        feature_dim: usize,
        split: Split,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::domain(
                "num_classes and feature_dim must be positive",
            ));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id) {
                return Err(Error::domain(format!("duplicate sample id {}", s.id)));
            }
            if s.features.len() != feature_dim {
                return Err(Error::domain(format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    feature_dim
                )));
            }
            if let Some(bad) = s.features.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::domain(format!(
                    "sample {} has feature value {} (must be finite and >= 0)",
                    s.id, bad
                )));
            }
            for (what, class) in [
                ("label", Some(s.label)),
                ("origin label", s.origin_label),
                ("filtered prediction", s.filtered_prediction),
            ] {
                if let Some(c) = class {
                    if c >= num_classes {
                        return Err(Error::domain(format!(
                            "sample {} has {} {} but there are {} classes",
                            s.id, what, c, num_classes
                        )));
                    }
                }
            }
        }
        Ok(FeatureDataset {
            samples,
            num_classes,
            feature_dim,
            split,
        })
    }

    pub fn samples(&self) -> &[FeatureSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Samples whose label is `class`, ordered by id.
    pub fn class_subset(&self, class: ClassId) -> Result<ClassView<'_>> {
        if class >= self.num_classes {
            return Err(Error::domain(format!(
                "class {} out of range for {} classes",
                class, self.num_classes
            )));
        }
        let mut samples: Vec<&FeatureSample> =
            self.samples.iter().filter(|s| s.label == class).collect();
        samples.sort_by_key(|s| s.id);
        Ok(ClassView { class, samples })
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for s in &self.samples {
            sizes[s.label] += 1;
        }
        sizes
    }

    pub fn has_poison(&self) -> bool {
        self.samples.iter().any(|s| s.is_poisoned)
    }

    /// Every sample carries a filtered prediction.
    pub fn has_filtered_predictions(&self) -> bool {
        self.samples.iter().all(|s| s.filtered_prediction.is_some())
    }

    pub fn into_samples(self) -> Vec<FeatureSample> {
        self.samples
    }
}

/// Borrowed view over one class of a dataset.
#[derive(Clone, Debug)]
pub struct ClassView<'a> {
    pub class: ClassId,
    pub samples: Vec<&'a FeatureSample>,
}

impl<'a> ClassView<'a> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Features as an `n x d` matrix in f64.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.samples.first().map_or(0, |s| s.features.len());
        let mut m = Array2::zeros((self.samples.len(), d));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.samples) {
            for (dst, &src) in row.iter_mut().zip(&s.features) {
                *dst = src as f64;
            }
        }
        m
    }

    /// Ground-truth poisoned ids (GP) of this class.
    pub fn ground_truth_poisoned(&self) -> BTreeSet<u64> {
        self.samples
            .iter()
            .filter(|s| s.is_poisoned)
            .map(|s| s.id)
            .collect()
    }

    /// Ground-truth benign ids (GB) of this class.
    pub fn ground_truth_benign(&self) -> BTreeSet<u64> {
        self.samples
            .iter()
            .filter(|s| !s.is_poisoned)
            .map(|s| s.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: u64, label: ClassId) -> FeatureSample {
        FeatureSample::benign(id, vec![id as f32, 1.0], label)
    }

    #[test]
    fn class_subset_picks_matching_labels() {
        let ds = FeatureDataset::new(
            vec![sample(0, 0), sample(1, 1), sample(2, 0)],
            2,
            2,
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.class_subset(0).unwrap().ids(), vec![0, 2]);
        assert_eq!(ds.class_subset(1).unwrap().ids(), vec![1]);
    }

    #[test]
    fn class_subset_out_of_range() {
        let ds = FeatureDataset::new(vec![sample(0, 0)], 2, 2, Split::Train).unwrap();
        assert!(matches!(ds.class_subset(3), Err(Error::Domain(_))));
        assert!(matches!(ds.class_subset(2), Err(Error::Domain(_))));
    }

    #[test]
    fn class_subset_is_ordered_by_id() {
        let ds = FeatureDataset::new(
            vec![sample(9, 0), sample(3, 0), sample(5, 0)],
            1,
            2,
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.class_subset(0).unwrap().ids(), vec![3, 5, 9]);
    }

    #[test]
    fn rejects_negative_features_and_bad_labels() {
        let neg = FeatureSample::benign(0, vec![-0.5, 1.0], 0);
        assert!(FeatureDataset::new(vec![neg], 1, 2, Split::Train).is_err());
        let nan = FeatureSample::benign(0, vec![f32::NAN, 1.0], 0);
        assert!(FeatureDataset::new(vec![nan], 1, 2, Split::Train).is_err());
        assert!(FeatureDataset::new(vec![sample(0, 4)], 2, 2, Split::Train).is_err());
        assert!(FeatureDataset::new(vec![sample(0, 0), sample(0, 1)], 2, 2, Split::Train).is_err());
        let short = FeatureSample::benign(0, vec![1.0], 0);
        assert!(FeatureDataset::new(vec![short], 1, 2, Split::Train).is_err());
    }

    #[test]
    fn ground_truth_sets_are_complementary() {
        let mut p = sample(1, 0);
        p.is_poisoned = true;
        p.origin_label = Some(1);
        let ds = FeatureDataset::new(vec![sample(0, 0), p, sample(2, 0)], 2, 2, Split::Train)
            .unwrap();
        let view = ds.class_subset(0).unwrap();
        let gp = view.ground_truth_poisoned();
        let gb = view.ground_truth_benign();
        assert_eq!(gp, BTreeSet::from([1]));
        assert_eq!(gb, BTreeSet::from([0, 2]));
    }

    proptest! {
        #[test]
        fn class_subsets_partition_the_dataset(labels in prop::collection::vec(0usize..5, 1..80)) {
            let samples: Vec<_> = labels.iter().enumerate().map(|(i, &l)| sample(i as u64, l)).collect();
            let ds = FeatureDataset::new(samples, 5, 2, Split::Train).unwrap();
            let mut all = Vec::new();
            for c in 0..5 {
                let view = ds.class_subset(c).unwrap();
                prop_assert!(view.samples.iter().all(|s| s.label == c));
                all.extend(view.ids());
            }
            all.sort_unstable();
            let expected: Vec<u64> = (0..labels.len() as u64).collect();
            prop_assert_eq!(all, expected);
        }
    }
}
