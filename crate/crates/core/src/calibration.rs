//! Threshold calibration on benign validation data: the threshold whose
//! class-averaged false positive rate is closest to a target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassView, ClassifierHead, FeatureDataset, FeatureSample};
use crate::detector::{derive_seed, Detector, ReferenceSet};
use crate::error::{Error, Result};
use crate::metrics::{theta_grid, GRID_POINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub target_fpr: f64,
    pub grid_points: usize,
    /// Share of each validation class used as the inspected half.
    pub inspected_fraction: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            target_fpr: 0.05,
            grid_points: GRID_POINTS,
            inspected_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub theta: f64,
    /// Class-averaged validation FPR at `theta`.
    pub fpr: f64,
    pub grid: Vec<f64>,
    pub mean_fpr: Vec<f64>,
    /// Per class, FPR at every grid point.
    pub class_fpr: Vec<Vec<f64>>,
}

/// argmin over the grid of `|target - fpr|`; ties go to the smallest
/// threshold.
pub fn calibrate_theta(grid: &[f64], fpr: &[f64], target: f64) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::config("empty threshold grid"));
    }
    if grid.len() != fpr.len() {
        return Err(Error::domain("grid and FPR curve differ in length"));
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let (d, db) = ((target - fpr[i]).abs(), (target - fpr[best]).abs());
        if d < db || (d == db && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok((grid[best], fpr[best]))
}

/// Seeded per-class split of the validation set into an inspected part and
/// a reference part.
pub fn split_validation<'a>(
    val: &'a FeatureDataset,
    inspected_fraction: f64,
    seed: u64,
) -> Result<(Vec<ClassView<'a>>, Vec<&'a FeatureSample>)> {
    if !(inspected_fraction > 0.0 && inspected_fraction < 1.0) {
        return Err(Error::config("inspected fraction must be in (0, 1)"));
    }
    if val.has_poison() {
        return Err(Error::config("validation set contains poisoned samples"));
    }
    let mut inspected = Vec::with_capacity(val.num_classes());
    let mut reference = Vec::new();
    for c in 0..val.num_classes() {
        let mut view = val.class_subset(c)?;
        if view.len() < 2 {
            return Err(Error::config(format!(
                "validation class {} has {} samples; cannot split",
                c,
                view.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        view.samples.shuffle(&mut rng);
        let k = ((view.len() as f64 * inspected_fraction).round() as usize).clamp(1, view.len() - 1);
        let mut held: Vec<&FeatureSample> = view.samples.split_off(k);
        view.samples.sort_by_key(|s| s.id);
        held.sort_by_key(|s| s.id);
        reference.extend(held);
        inspected.push(view);
    }
    reference.sort_by_key(|s| s.id);
    Ok((inspected, reference))
}

/// Runs `detector` on each inspected validation class and averages the
/// flagged fraction over classes at every grid threshold.
pub fn calibrate(
    detector: &dyn Detector,
    val: &FeatureDataset,
    head: &ClassifierHead,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<Calibration> {
    if !(0.0..=1.0).contains(&cfg.target_fpr) {
        return Err(Error::config("target FPR outside [0, 1]"));
    }
    let grid = theta_grid(cfg.grid_points)?;
    let (inspected, reference) =
        split_validation(val, cfg.inspected_fraction, derive_seed(seed, 0xCA11))?;
    let reference = ReferenceSet::from_samples(&reference, val.num_classes(), head)?;
    reference.require_all_classes()?;
    let scores = inspected
        .par_iter()
        .map(|view| {
            detector.score_class(view, &reference, derive_seed(derive_seed(seed, 0xCA12), view.class as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let class_fpr: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| grid.iter().map(|&t| s.flagged_fraction(t)).collect())
        .collect();
    let l = class_fpr.len() as f64;
    let mean_fpr: Vec<f64> = (0..grid.len())
        .map(|g| class_fpr.iter().map(|c| c[g]).sum::<f64>() / l)
        .collect();
    let (theta, fpr) = calibrate_theta(&grid, &mean_fpr, cfg.target_fpr)?;
    Ok(Calibration {
        theta,
        fpr,
        grid,
        mean_fpr,
        class_fpr,
    })
}
