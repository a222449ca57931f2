//! Scoring whole datasets and turning scores into per-class records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, FeatureDataset, FeatureDump};
use crate::detector::{check_theta, derive_seed, ClassScores, Detector, Method, ReferenceSet};
use crate::error::{Error, Result};
use crate::metrics::{grid_auc, roc_sweep, tpr_fpr, ClassCase, MetricsRecord, RocPoint};

/// Runs `detector` on every class of `train`, in parallel over classes.
pub fn score_dataset(
    detector: &dyn Detector,
    train: &FeatureDataset,
    reference: &ReferenceSet,
    seed: u64,
) -> Result<Vec<ClassScores>> {
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
            detector.score_class(&view, reference, derive_seed(seed, c as u64))
        })
        .collect()
}

/// What is known about the attack behind a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackContext {
    pub dataset: String,
    pub targets: Vec<ClassId>,
    pub alpha: Option<f64>,
    pub successful: bool,
}

impl AttackContext {
    pub fn benign(dataset: impl Into<String>) -> Self {
        AttackContext {
            dataset: dataset.into(),
            targets: Vec::new(),
            alpha: None,
            successful: true,
        }
    }

    /// Reads targets, alpha and the success gate from the dump metadata.
    /// Without metadata the targets are the labels of flagged poison.
    pub fn from_dump(dataset: impl Into<String>, dump: &FeatureDump) -> Self {
        let meta = dump.manifest.meta.as_ref();
        let mut targets: Vec<ClassId> = match meta {
            Some(m) if !m.target_classes.is_empty() => m.target_classes.clone(),
            _ => dump
                .dataset
                .samples()
                .iter()
                .filter(|s| s.is_poisoned)
                .map(|s| s.label)
                .collect(),
        };
        targets.sort_unstable();
        targets.dedup();
        AttackContext {
            dataset: dataset.into(),
            alpha: if targets.is_empty() { None } else { meta.and_then(|m| m.alpha) },
            successful: meta.and_then(|m| m.gates.as_ref()).is_none_or(|g| g.successful),
            targets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: ClassId,
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<MetricsRecord>,
    /// ROC sweeps of classes holding both poisoned and benign samples.
    pub roc: Vec<ClassRoc>,
}

/// Per-class rates at `theta` and, where defined, the grid AUC.
pub fn evaluate_scores(
    method: Method,
    scores: &[ClassScores],
    train: &FeatureDataset,
    ctx: &AttackContext,
    theta: f64,
    grid: &[f64],
) -> Result<Evaluation> {
    check_theta(theta)?;
    let mut records = Vec::with_capacity(scores.len());
    let mut roc = Vec::new();
    for s in scores {
        let view = train.class_subset(s.class)?;
        let gp = view.ground_truth_poisoned();
        let gb = view.ground_truth_benign();
        let (p, b) = s.judge(theta);
        let rates = tpr_fpr(&p, &b, &gp, &gb)?;
        let auc = if !gp.is_empty() && !gb.is_empty() {
            roc.push(ClassRoc {
                class: s.class,
                points: roc_sweep(s, &gp, grid)?,
            });
            Some(grid_auc(s, &gp, grid)?)
        } else {
            None
        };
        let case = ClassCase::of(s.class, &ctx.targets);
        records.push(MetricsRecord {
            method,
            dataset: ctx.dataset.clone(),
            case,
            class: s.class,
            alpha: ctx.alpha,
            target: (case == ClassCase::Poisoned).then_some(s.class),
            theta,
            tpr: rates.tpr,
            fpr: rates.fpr,
            auc,
            successful: ctx.successful,
        });
    }
    Ok(Evaluation { records, roc })
}
