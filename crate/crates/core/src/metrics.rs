//! Accuracy and attack success, per-class detection rates, ROC sweeps and
//! the averaging used to report them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassifierHead, FeatureDataset};
use crate::detector::{ClassScores, Method};
use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 201;

/// Fraction of `predictions` equal to `labels`.
pub fn acc(predictions: &[ClassId], labels: &[ClassId]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::domain("accuracy of an empty test set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::domain("predictions and labels differ in length"));
    }
    let ok = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ok as f64 / predictions.len() as f64)
}

/// Fraction of triggered predictions that land on `target`.
pub fn asr(predictions: &[ClassId], target: ClassId) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::domain("attack success rate of an empty poisoned test set"));
    }
    let hit = predictions.iter().filter(|&&p| p == target).count();
    Ok(hit as f64 / predictions.len() as f64)
}

pub fn predict(head: &ClassifierHead, ds: &FeatureDataset) -> Result<Vec<ClassId>> {
    ds.samples()
        .iter()
        .map(|s| head.classify_f32(&s.features))
        .collect()
}

pub fn head_acc(head: &ClassifierHead, test: &FeatureDataset) -> Result<f64> {
    let labels: Vec<ClassId> = test.samples().iter().map(|s| s.label).collect();
    acc(&predict(head, test)?, &labels)
}

/// Attack success on triggered copies of non-target test samples.
pub fn head_asr(head: &ClassifierHead, triggered: &FeatureDataset, target: ClassId) -> Result<f64> {
    if triggered.samples().iter().any(|s| s.label == target) {
        return Err(Error::domain("triggered test set contains target-class samples"));
    }
    asr(&predict(head, triggered)?, target)
}

/// A backdoor counts only when it works and leaves benign accuracy intact.
pub fn attack_successful(asr: f64, acc_backdoored: f64, acc_clean: f64) -> bool {
    asr > 0.90 && (acc_backdoored - acc_clean).abs() < 0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    /// Undefined when the class holds no poisoned sample.
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Detection rates of a (poisoned, benign) split against ground truth.
pub fn tpr_fpr(
    p: &BTreeSet<u64>,
    b: &BTreeSet<u64>,
    gp: &BTreeSet<u64>,
    gb: &BTreeSet<u64>,
) -> Result<Rates> {
    if !p.is_disjoint(b) {
        return Err(Error::domain("detected poisoned and benign sets overlap"));
    }
    if !gp.is_disjoint(gb) {
        return Err(Error::domain("ground-truth poisoned and benign sets overlap"));
    }
    if p.len() + b.len() != gp.len() + gb.len()
        || !p.iter().chain(b).all(|id| gp.contains(id) || gb.contains(id))
    {
        return Err(Error::domain("detection does not partition the inspected class"));
    }
    let tpr = (!gp.is_empty()).then(|| p.intersection(gp).count() as f64 / gp.len() as f64);
    if gb.is_empty() {
        log::warn!("class without benign samples; FPR undefined");
    }
    let fpr = (!gb.is_empty()).then(|| 1.0 - b.intersection(gb).count() as f64 / gb.len() as f64);
    Ok(Rates { tpr, fpr })
}

/// `points` evenly spaced thresholds covering `[0, 1]`.
pub fn theta_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::config("threshold grid needs at least two points"));
    }
    let last = (points - 1) as f64;
    Ok((0..points).map(|i| i as f64 / last).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub theta: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Re-judges a class at every grid threshold.
pub fn roc_sweep(scores: &ClassScores, gp: &BTreeSet<u64>, grid: &[f64]) -> Result<Vec<RocPoint>> {
    let positives = scores.ids.iter().filter(|id| gp.contains(id)).count();
    if positives != gp.len() {
        return Err(Error::domain("ground-truth poisoned ids outside the class"));
    }
    let negatives = scores.ids.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::domain("ROC needs both poisoned and benign samples"));
    }
    if grid.is_empty() {
        return Err(Error::config("empty threshold grid"));
    }
    Ok(grid
        .iter()
        .map(|&theta| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (id, rule) in scores.ids.iter().zip(&scores.rules) {
                if rule.flagged(theta) {
                    if gp.contains(id) {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            RocPoint {
                theta,
                fpr: fp as f64 / negatives as f64,
                tpr: tp as f64 / positives as f64,
            }
        })
        .collect())
}

/// Trapezoid area under (FPR, TPR) points, anchored at (0, 0) and (1, 1)
/// and sorted by FPR then TPR.
pub fn auc_from_points(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn grid_auc(scores: &ClassScores, gp: &BTreeSet<u64>, grid: &[f64]) -> Result<f64> {
    let roc = roc_sweep(scores, gp, grid)?;
    Ok(auc_from_points(&roc.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>()))
}

/// Exact ROC area for real-valued scores (higher means more suspicious),
/// sweeping every distinct score.
pub fn score_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::domain("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("ROC needs both positive and negative samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(auc_from_points(&points))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassCase {
    /// Class of a dataset with no attack.
    #[serde(rename = "BC_B")]
    BenignDataset,
    /// Non-target class of a poisoned dataset.
    #[serde(rename = "BC_P")]
    BenignOfPoisoned,
    /// Target class of a poisoned dataset.
    #[serde(rename = "PC")]
    Poisoned,
}

impl ClassCase {
    pub fn tag(&self) -> &'static str {
        match self {
            ClassCase::BenignDataset => "BC_B",
            ClassCase::BenignOfPoisoned => "BC_P",
            ClassCase::Poisoned => "PC",
        }
    }

    pub fn of(class: ClassId, targets: &[ClassId]) -> Self {
        if targets.is_empty() {
            ClassCase::BenignDataset
        } else if targets.contains(&class) {
            ClassCase::Poisoned
        } else {
            ClassCase::BenignOfPoisoned
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    pub dataset: String,
    pub case: ClassCase,
    pub class: ClassId,
    pub alpha: Option<f64>,
    pub target: Option<ClassId>,
    pub theta: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
    /// Whether the attack behind this record passed the success gate.
    pub successful: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub case: ClassCase,
    /// `None` for the average over every poisoning ratio.
    pub alpha: Option<f64>,
    pub records: usize,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Means per (method, case, alpha) and per (method, case) over all alphas.
/// Records of unsuccessful attacks are left out; undefined entries are
/// skipped.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let kept: Vec<&MetricsRecord> = records.iter().filter(|r| r.successful).collect();
    let dropped = records.len() - kept.len();
    if dropped > 0 {
        log::warn!("{} records from unsuccessful attacks left out of the averages", dropped);
    }
    let mut groups: BTreeMap<(Method, ClassCase, Option<u64>), Vec<&MetricsRecord>> =
        BTreeMap::new();
    for r in &kept {
        groups.entry((r.method, r.case, None)).or_default().push(r);
        if let Some(a) = r.alpha {
            groups
                .entry((r.method, r.case, Some(a.to_bits())))
                .or_default()
                .push(r);
        }
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((method, case, alpha), rs)| AggregateRow {
            method,
            case,
            alpha: alpha.map(f64::from_bits),
            records: rs.len(),
            tpr: mean_defined(rs.iter().map(|r| r.tpr)),
            fpr: mean_defined(rs.iter().map(|r| r.fpr)),
            auc: mean_defined(rs.iter().map(|r| r.auc)),
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.method, a.case)
            .cmp(&(b.method, b.case))
            .then(match (a.alpha, b.alpha) {
                (None, None) => std::cmp::Ordering::Equal,
                (None, Some(_)) => std::cmp::Ordering::Less,
                (Some(_), None) => std::cmp::Ordering::Greater,
                (Some(x), Some(y)) => x.total_cmp(&y),
            })
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::FlagRule;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(ids: impl IntoIterator<Item = u64>) -> BTreeSet<u64> {
        ids.into_iter().collect()
    }

    #[test]
    fn accuracy_and_success() {
        assert_eq!(acc(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(acc(&[1, 0, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(acc(&[], &[]).is_err());
        assert_eq!(asr(&[4, 4, 4], 4).unwrap(), 1.0);
        assert!(asr(&[], 4).is_err());
        assert!(attack_successful(0.95, 0.985, 0.99));
        assert!(!attack_successful(0.90, 0.99, 0.99));
        assert!(!attack_successful(0.99, 0.97, 0.99));
    }

    #[test]
    fn rates_counting_example() {
        // |GP| = 10, |GB| = 90, nine poisoned and five benign detected.
        let gp = set(0..10);
        let gb = set(10..100);
        let p = set((0..9).chain(10..15));
        let b = set((9..10).chain(15..100));
        let r = tpr_fpr(&p, &b, &gp, &gb).unwrap();
        assert_eq!(r.tpr, Some(0.9));
        assert!((r.fpr.unwrap() - 5.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn rates_edge_cases() {
        let r = tpr_fpr(&set(0..3), &set(3..10), &set(0..3), &set(3..10)).unwrap();
        assert_eq!((r.tpr, r.fpr), (Some(1.0), Some(0.0)));
        let r = tpr_fpr(&set([]), &set(0..10), &set([]), &set(0..10)).unwrap();
        assert_eq!((r.tpr, r.fpr), (None, Some(0.0)));
        assert!(tpr_fpr(&set(0..3), &set(2..10), &set([]), &set(0..10)).is_err());
        assert!(tpr_fpr(&set(0..3), &set(3..9), &set([]), &set(0..10)).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = theta_grid(GRID_POINTS).unwrap();
        assert_eq!(g.len(), 201);
        assert_eq!((g[0], g[200]), (0.0, 1.0));
        assert_eq!(g[100], 0.5);
        assert!(theta_grid(1).is_err());
    }

    #[test]
    fn auc_anchor_cases() {
        // Detector that flags everything at every threshold.
        assert_eq!(auc_from_points(&[(1.0, 1.0)]), 0.5);
        // Perfect separation.
        assert_eq!(auc_from_points(&[(0.0, 1.0)]), 1.0);
        // Everything benign flagged, no poison: the collapsed case.
        assert_eq!(auc_from_points(&[(1.0, 0.0)]), 0.0);
    }

    /// Counts pairs (positive, negative) ordered correctly; ties count half.
    fn pairwise(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn random_scores_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        assert!((score_auc(&s, &y).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn grid_auc_of_rules() {
        let scores = ClassScores {
            class: 0,
            ids: (0..6).collect(),
            rules: vec![
                FlagRule::ScoreAtLeast(1.0),
                FlagRule::ScoreAtLeast(1.0),
                FlagRule::ScoreAtLeast(0.3),
                FlagRule::ScoreAtLeast(0.3),
                FlagRule::ScoreAtLeast(0.0),
                FlagRule::Always,
            ],
        };
        let grid = theta_grid(GRID_POINTS).unwrap();
        let auc = grid_auc(&scores, &set([0, 1]), &grid).unwrap();
        // Points: (1/4, 1) from theta 0 on, (3/4, 1), (1, 1).
        assert!((auc - (1.0 - 0.125)).abs() < 1e-12);
        let roc = roc_sweep(&scores, &set([0, 1]), &grid).unwrap();
        for w in roc.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn aggregate_groups() {
        let rec = |case, alpha, tpr, fpr, ok| MetricsRecord {
            method: Method::Ccaud,
            dataset: "d".into(),
            case,
            class: 0,
            alpha,
            target: None,
            theta: 0.1,
            tpr,
            fpr: Some(fpr),
            auc: None,
            successful: ok,
        };
        let rows = aggregate(&[
            rec(ClassCase::Poisoned, Some(0.1), Some(0.9), 0.04, true),
            rec(ClassCase::Poisoned, Some(0.2), Some(1.0), 0.06, true),
            rec(ClassCase::Poisoned, Some(0.2), Some(0.0), 0.50, false),
            rec(ClassCase::BenignDataset, None, None, 0.05, true),
        ]);
        let pc_all = rows
            .iter()
            .find(|r| r.case == ClassCase::Poisoned && r.alpha.is_none())
            .unwrap();
        assert_eq!(pc_all.records, 2);
        assert!((pc_all.tpr.unwrap() - 0.95).abs() < 1e-15);
        let pc_02 = rows.iter().find(|r| r.alpha == Some(0.2)).unwrap();
        assert_eq!(pc_02.records, 1);
        assert_eq!(pc_02.tpr, Some(1.0));
        let bcb = rows.iter().find(|r| r.case == ClassCase::BenignDataset).unwrap();
        assert_eq!((bcb.tpr, bcb.fpr), (None, Some(0.05)));
        assert_eq!(rows.len(), 4);
    }

    proptest! {
        #[test]
        fn trapezoid_matches_pairwise(raw in proptest::collection::vec((0u8..12, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 11.0).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let a = score_auc(&scores, &pos).unwrap();
            prop_assert!((a - pairwise(&scores, &pos)).abs() < 1e-9);
            let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
            prop_assert!((score_auc(&cubed, &pos).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn rates_ignore_order(mut ids in proptest::collection::vec(0u64..1000, 1..60), flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 60)) {
            ids.sort_unstable();
            ids.dedup();
            let (mut p, mut b, mut gp, mut gb) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
            for (id, (det, truth)) in ids.iter().zip(&flags) {
                if *det { p.insert(*id); } else { b.insert(*id); }
                if *truth { gp.insert(*id); } else { gb.insert(*id); }
            }
            let r = tpr_fpr(&p, &b, &gp, &gb).unwrap();
            let tp = ids.iter().zip(&flags).filter(|(_, f)| f.0 && f.1).count();
            if !gp.is_empty() {
                prop_assert_eq!(r.tpr, Some(tp as f64 / gp.len() as f64));
            }
        }
    }
}
