//! End-to-end runs of one method on one dataset: threshold choice,
//! per-class analysis, verdicts and evaluation records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ac_analyze, ci_analyze, AcConfig, ActivationClustering, CiConfig, CleanseInspection};
use crate::calibration::{calibrate, Calibration, CalibrationConfig};
use crate::data::{ClassId, ClassifierHead, FeatureDataset};
use crate::detector::{check_theta, derive_seed, ClassScores, Detector, Method, ReferenceSet};
use crate::evaluate::{evaluate_scores, AttackContext, Evaluation};
use crate::error::Result;
use crate::metrics::theta_grid;
use crate::pcd::{analyze, Ccaud, PcdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdChoice {
    Fixed(f64),
    Calibrate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pcd: PcdConfig,
    pub ac: AcConfig,
    pub ci: CiConfig,
    pub threshold: ThresholdChoice,
    pub calibration: CalibrationConfig,
    pub seed: u64,
    /// Keep per-class embeddings (CCA-UD only).
    pub keep_embeddings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let pcd = PcdConfig::default();
        PipelineConfig {
            ci: CiConfig::new(pcd.reduction.clone()),
            pcd,
            ac: AcConfig::default(),
            threshold: ThresholdChoice::Calibrate,
            calibration: CalibrationConfig::default(),
            seed: 0,
            keep_embeddings: false,
        }
    }
}

impl PipelineConfig {
    pub fn detector(&self, method: Method) -> Box<dyn Detector> {
        match method {
            Method::Ccaud => Box::new(Ccaud { cfg: self.pcd.clone() }),
            Method::Ac => Box::new(ActivationClustering { cfg: self.ac.clone() }),
            Method::Ci => Box::new(CleanseInspection { cfg: self.ci.clone() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub class: ClassId,
    pub ids: Vec<u64>,
    pub coords: Vec<Vec<f64>>,
    /// DBSCAN cluster per sample, `None` for outliers.
    pub clusters: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedClass {
    pub class: ClassId,
    pub poisoned: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub theta: f64,
    pub calibration: Option<Calibration>,
    pub scores: Vec<ClassScores>,
    /// Method-specific verdicts, one JSON object per cluster (per class for
    /// AC), each tagged with the method name.
    pub verdicts: Vec<serde_json::Value>,
    pub flagged: Vec<FlaggedClass>,
    pub evaluation: Evaluation,
    pub embeddings: Vec<ClassEmbedding>,
}

fn tagged<T: Serialize>(method: Method, v: &T) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(v)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("method".into(), serde_json::Value::String(method.name().into()));
    }
    Ok(value)
}

/// Scores every class with `method`, picks the threshold and evaluates.
pub fn run_method(
    method: Method,
    train: &FeatureDataset,
    val: &FeatureDataset,
    head: &ClassifierHead,
    ctx: &AttackContext,
    cfg: &PipelineConfig,
) -> Result<MethodRun> {
    let reference = ReferenceSet::new(val, head)?;
    reference.require_all_classes()?;
    let calibration = match cfg.threshold {
        ThresholdChoice::Fixed(t) => {
            check_theta(t)?;
            None
        }
        ThresholdChoice::Calibrate => {
            let det = cfg.detector(method);
            Some(calibrate(det.as_ref(), val, head, &cfg.calibration, derive_seed(cfg.seed, 1))?)
        }
    };
    let theta = match (&calibration, cfg.threshold) {
        (Some(c), _) => c.theta,
        (None, ThresholdChoice::Fixed(t)) => t,
        (None, ThresholdChoice::Calibrate) => unreachable!("calibration ran"),
    };
    let seed = derive_seed(cfg.seed, 2);
    let class_seed = |c: ClassId| derive_seed(seed, c as u64);
    let classes: Vec<ClassId> = (0..train.num_classes()).collect();

    let mut embeddings = Vec::new();
    let (scores, verdicts) = match method {
        Method::Ccaud => {
            let analyses = analyze(train, &reference, &cfg.pcd, seed)?;
            let mut verdicts = Vec::new();
            for a in &analyses {
                for v in a.verdicts(theta) {
                    verdicts.push(tagged(method, &v)?);
                }
                if cfg.keep_embeddings {
                    if let Some(e) = &a.embedding {
                        embeddings.push(ClassEmbedding {
                            class: a.class,
                            ids: a.partition.ids.clone(),
                            coords: e.rows().into_iter().map(|r| r.to_vec()).collect(),
                            clusters: a.partition.assignment.clone(),
                        });
                    }
                }
            }
            (analyses.iter().map(|a| a.scores()).collect::<Vec<_>>(), verdicts)
        }
        Method::Ac => {
            let analyses = classes
                .par_iter()
                .map(|&c| ac_analyze(&train.class_subset(c)?, &cfg.ac, class_seed(c)))
                .collect::<Result<Vec<_>>>()?;
            let verdicts = analyses
                .iter()
                .map(|a| tagged(method, &a.verdict(theta)?))
                .collect::<Result<Vec<_>>>()?;
            (analyses.iter().map(|a| a.scores()).collect(), verdicts)
        }
        Method::Ci => {
            let analyses = classes
                .par_iter()
                .map(|&c| ci_analyze(&train.class_subset(c)?, &reference, &cfg.ci, class_seed(c)))
                .collect::<Result<Vec<_>>>()?;
            let mut verdicts = Vec::new();
            for a in &analyses {
                for v in a.verdicts(theta)? {
                    verdicts.push(tagged(method, &v)?);
                }
            }
            (analyses.iter().map(|a| a.scores()).collect(), verdicts)
        }
    };
    let flagged = scores
        .iter()
        .map(|s| FlaggedClass {
            class: s.class,
            poisoned: s.judge(theta).0.into_iter().collect(),
        })
        .collect();
    let grid = theta_grid(cfg.calibration.grid_points)?;
    let evaluation = evaluate_scores(method, &scores, train, ctx, theta, &grid)?;
    Ok(MethodRun {
        method,
        theta,
        calibration,
        scores,
        verdicts,
        flagged,
        evaluation,
        embeddings,
    })
}
