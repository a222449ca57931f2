//! Shared domain types: feature datasets, the classifier head, poisoning
//! metadata and the on-disk feature dump.

mod dataset;
mod dump;
mod head;

pub use dataset::{ClassId, ClassView, FeatureDataset, FeatureSample, Split};
pub use dump::{read_dump, write_dump, AttackGates, DumpManifest, DumpMeta, FeatureDump};
pub use head::{ClassifierHead, DenseLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triggers::TriggerSpec;

/// How poisoned samples are labelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoisonMode {
    /// Samples from other classes, relabelled to the target.
    Corrupted,
    /// Samples from the target class, labels left intact.
    Clean,
}

/// Attack parameters for a single poisoned training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub target: ClassId,
    /// Fraction of poisoned samples inside the target class.
    pub alpha: f64,
    pub mode: PoisonMode,
    pub trigger: TriggerSpec,
}

impl PoisonConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.target >= num_classes {
            return Err(Error::domain(format!(
                "target class {} out of range for {} classes",
                self.target, num_classes
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!(
                "poisoning ratio {} outside (0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }
}
