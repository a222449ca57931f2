//! Common shape of every detection method: a per-class, threshold-free
//! analysis that can be judged at any threshold in `[0, 1]`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassView, ClassifierHead, FeatureDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CCA-UD")]
    Ccaud,
    #[serde(rename = "AC")]
    Ac,
    #[serde(rename = "CI")]
    Ci,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ccaud => "CCA-UD",
            Method::Ac => "AC",
            Method::Ci => "CI",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// When a sample is flagged as poisoned, as a function of the threshold.
/// Every rule is monotone: once flagged at some threshold, flagged at all
/// larger ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlagRule {
    Always,
    Never,
    /// Flagged when `score >= 1 - theta`.
    ScoreAtLeast(f64),
    /// Flagged when `ratio < theta`.
    RatioBelow(f64),
}

impl FlagRule {
    pub fn flagged(&self, theta: f64) -> bool {
        match *self {
            FlagRule::Always => true,
            FlagRule::Never => false,
            FlagRule::ScoreAtLeast(score) => score >= 1.0 - theta,
            FlagRule::RatioBelow(ratio) => ratio < theta,
        }
    }
}

pub fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::domain(format!("threshold {} outside [0, 1]", theta)));
    }
    Ok(())
}

/// Threshold-free outcome of analysing one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: ClassId,
    pub ids: Vec<u64>,
    pub rules: Vec<FlagRule>,
}

impl ClassScores {
    /// Splits the class into (poisoned, benign) id sets at `theta`.
    pub fn judge(&self, theta: f64) -> (BTreeSet<u64>, BTreeSet<u64>) {
        let mut poisoned = BTreeSet::new();
        let mut benign = BTreeSet::new();
        for (id, rule) in self.ids.iter().zip(&self.rules) {
            if rule.flagged(theta) {
                poisoned.insert(*id);
            } else {
                benign.insert(*id);
            }
        }
        (poisoned, benign)
    }

    /// Fraction of the class flagged at `theta`.
    pub fn flagged_fraction(&self, theta: f64) -> f64 {
        if self.ids.is_empty() {
            return 0.0;
        }
        self.rules.iter().filter(|r| r.flagged(theta)).count() as f64 / self.ids.len() as f64
    }
}

/// Benign validation data together with the model head: everything a
/// detector may consult besides the class under inspection.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    head: ClassifierHead,
    labels: Vec<ClassId>,
    features: Vec<Vec<f64>>,
    class_means: Vec<Option<Vec<f64>>>,
    num_classes: usize,
}

impl ReferenceSet {
    pub fn new(val: &FeatureDataset, head: &ClassifierHead) -> Result<Self> {
        let refs: Vec<_> = val.samples().iter().collect();
        Self::from_samples(&refs, val.num_classes(), head)
    }

    pub fn from_samples(
        samples: &[&crate::data::FeatureSample],
        num_classes: usize,
        head: &ClassifierHead,
    ) -> Result<Self> {
        let d = head.input_dim();
        if head.num_classes() != num_classes {
            return Err(Error::config(format!(
                "head has {} outputs but the data has {} classes",
                head.num_classes(),
                num_classes
            )));
        }
        let mut sums = vec![vec![0.0f64; d]; num_classes];
        let mut counts = vec![0usize; num_classes];
        let mut labels = Vec::with_capacity(samples.len());
        let mut features = Vec::with_capacity(samples.len());
        for s in samples {
            if s.features.len() != d {
                return Err(Error::config(format!(
                    "validation sample {} has {} features, head expects {}",
                    s.id,
                    s.features.len(),
                    d
                )));
            }
            if s.is_poisoned {
                log::warn!("validation sample {} is flagged as poisoned", s.id);
            }
            let f = s.features_f64();
            for (acc, v) in sums[s.label].iter_mut().zip(&f) {
                *acc += v;
            }
            counts[s.label] += 1;
            labels.push(s.label);
            features.push(f);
        }
        let class_means = sums
            .into_iter()
            .zip(&counts)
            .map(|(sum, &c)| (c > 0).then(|| sum.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(ReferenceSet {
            head: head.clone(),
            labels,
            features,
            class_means,
            num_classes,
        })
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Mean validation feature of `class`.
    pub fn class_mean(&self, class: ClassId) -> Result<&[f64]> {
        self.class_means
            .get(class)
            .and_then(|m| m.as_deref())
            .ok_or_else(|| {
                Error::config(format!("validation set has no samples of class {}", class))
            })
    }

    /// Fails unless every class has at least one validation sample.
    pub fn require_all_classes(&self) -> Result<()> {
        for c in 0..self.num_classes {
            self.class_mean(c)?;
        }
        Ok(())
    }
}

/// A detection method that scores one class at a time.
pub trait Detector: Sync {
    fn method(&self) -> Method;

    fn score_class(
        &self,
        view: &ClassView<'_>,
        reference: &ReferenceSet,
        seed: u64,
    ) -> Result<ClassScores>;
}

/// Mixes a run seed with a stream index (class, restart, ...).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_rules() {
        assert!(FlagRule::Always.flagged(0.0));
        assert!(!FlagRule::Never.flagged(1.0));
        assert!(FlagRule::ScoreAtLeast(0.9).flagged(0.2));
        assert!(!FlagRule::ScoreAtLeast(0.0).flagged(0.5));
        assert!(FlagRule::ScoreAtLeast(0.0).flagged(1.0));
        assert!(FlagRule::RatioBelow(0.3).flagged(0.31));
        assert!(!FlagRule::RatioBelow(0.3).flagged(0.3));
    }

    #[test]
    fn judge_partitions_ids() {
        let s = ClassScores {
            class: 0,
            ids: vec![1, 2, 3, 4],
            rules: vec![
                FlagRule::Always,
                FlagRule::ScoreAtLeast(0.5),
                FlagRule::ScoreAtLeast(0.05),
                FlagRule::Never,
            ],
        };
        let (p, b) = s.judge(0.5);
        assert_eq!(p, BTreeSet::from([1, 2]));
        assert_eq!(b, BTreeSet::from([3, 4]));
        assert!((s.flagged_fraction(1.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
