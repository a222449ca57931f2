//! Run directories: manifest, JSON report, flat CSV tables, ROC curves and
//! verdict lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Method;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateRow, ClassCase, MetricsRecord};
use crate::pipeline::MethodRun;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    pub inputs: Vec<String>,
    /// Full configuration, enough to reproduce the run.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, workers: usize, inputs: Vec<String>, config: serde_json::Value) -> Self {
        RunManifest {
            tool: "ccaud".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            workers,
            inputs,
            config,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub dataset: String,
    pub theta: f64,
    pub calibrated: bool,
    /// Class-averaged validation FPR at `theta` when calibrated.
    pub validation_fpr: Option<f64>,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifest: RunManifest,
    pub runs: Vec<MethodSummary>,
    pub records: Vec<MetricsRecord>,
    pub aggregates: Vec<AggregateRow>,
}

impl Report {
    pub fn new(manifest: RunManifest, runs: &[(String, MethodRun)]) -> Self {
        let records: Vec<MetricsRecord> = runs
            .iter()
            .flat_map(|(_, r)| r.evaluation.records.iter().cloned())
            .collect();
        let summaries = runs
            .iter()
            .map(|(name, r)| MethodSummary {
                method: r.method,
                dataset: name.clone(),
                theta: r.theta,
                calibrated: r.calibration.is_some(),
                validation_fpr: r.calibration.as_ref().map(|c| c.fpr),
                flagged: r.flagged.iter().map(|f| f.poisoned.len()).sum(),
            })
            .collect();
        Report {
            manifest,
            runs: summaries,
            aggregates: aggregate(&records),
            records,
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{}", x)).unwrap_or_default()
}

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("method,dataset,case,class,alpha,target,theta,tpr,fpr,auc,successful\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.dataset,
            r.case.tag(),
            r.class,
            opt(r.alpha),
            r.target.map(|t| t.to_string()).unwrap_or_default(),
            r.theta,
            opt(r.tpr),
            opt(r.fpr),
            opt(r.auc),
            r.successful
        );
    }
    s
}

/// Per-alpha rows with one column group per case, in the layout of the
/// usual results tables.
pub fn aggregate_table_csv(rows: &[AggregateRow]) -> String {
    let mut alphas: Vec<Option<f64>> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !alphas.iter().any(|a| a.map(f64::to_bits) == r.alpha.map(f64::to_bits)) {
            alphas.push(r.alpha);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    alphas.sort_by(|a, b| match (a, b) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (Some(_), None) => std::cmp::Ordering::Less,
        (Some(x), Some(y)) => x.total_cmp(y),
    });
    let find = |m: Method, c: ClassCase, a: Option<f64>| {
        rows.iter()
            .find(|r| r.method == m && r.case == c && r.alpha.map(f64::to_bits) == a.map(f64::to_bits))
    };
    // With a single ratio and no benign datasets the global row repeats it.
    let has_benign = rows.iter().any(|r| r.case == ClassCase::BenignDataset);
    if alphas.iter().filter(|a| a.is_some()).count() == 1 && !has_benign {
        alphas.retain(Option::is_some);
    }
    let mut s = String::from("alpha,method,tpr_pc,fpr_pc,auc_pc,fpr_bcp,fpr_bcb\n");
    for &a in &alphas {
        for &m in &methods {
            let pc = find(m, ClassCase::Poisoned, a);
            let bcp = find(m, ClassCase::BenignOfPoisoned, a);
            // Benign datasets carry no alpha; their average goes on every row.
            let bcb = find(m, ClassCase::BenignDataset, None);
            if pc.is_none() && bcp.is_none() && (a.is_some() || bcb.is_none()) {
                continue;
            }
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                a.map(|x| x.to_string()).unwrap_or_else(|| "all".into()),
                m,
                opt(pc.and_then(|r| r.tpr)),
                opt(pc.and_then(|r| r.fpr)),
                opt(pc.and_then(|r| r.auc)),
                opt(bcp.and_then(|r| r.fpr)),
                opt(bcb.and_then(|r| r.fpr)),
            );
        }
    }
    s
}

pub fn roc_csv(run: &MethodRun) -> String {
    let mut s = String::from("class,theta,fpr,tpr\n");
    for c in &run.evaluation.roc {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{},{}", c.class, p.theta, p.fpr, p.tpr);
        }
    }
    s
}

pub fn verdicts_jsonl(run: &MethodRun) -> Result<String> {
    let mut s = String::new();
    for v in &run.verdicts {
        s.push_str(&serde_json::to_string(v)?);
        s.push('\n');
    }
    Ok(s)
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Writes a complete run directory.
pub fn write_run_dir(dir: &Path, report: &Report, runs: &[(String, MethodRun)], embeddings: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("manifest.json"), &serde_json::to_string_pretty(&report.manifest)?)?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write(&dir.join("report.csv"), &records_csv(&report.records))?;
    write(&dir.join("table.csv"), &aggregate_table_csv(&report.aggregates))?;
    let single = runs.iter().map(|(n, _)| n).collect::<std::collections::BTreeSet<_>>().len() == 1;
    for (name, run) in runs {
        let stem = if single {
            slug(run.method.name())
        } else {
            format!("{}_{}", slug(run.method.name()), slug(name))
        };
        write(&dir.join(format!("roc_{}.csv", stem)), &roc_csv(run))?;
        write(&dir.join(format!("verdicts_{}.jsonl", stem)), &verdicts_jsonl(run)?)?;
        write(&dir.join(format!("flagged_{}.json", stem)), &serde_json::to_string_pretty(&run.flagged)?)?;
        if let Some(c) = &run.calibration {
            let mut s = String::from("theta,mean_fpr\n");
            for (t, f) in c.grid.iter().zip(&c.mean_fpr) {
                let _ = writeln!(s, "{},{}", t, f);
            }
            write(&dir.join(format!("calibration_{}.csv", stem)), &s)?;
        }
        if embeddings && !run.embeddings.is_empty() {
            let mut s = String::from("class,id,x,y,cluster\n");
            for e in &run.embeddings {
                for ((id, xy), k) in e.ids.iter().zip(&e.coords).zip(&e.clusters) {
                    let coords: Vec<String> = xy.iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(
                        s,
                        "{},{},{},{}",
                        e.class,
                        id,
                        coords.join(","),
                        k.map(|k| k.to_string()).unwrap_or_else(|| "-1".into())
                    );
                }
            }
            write(&dir.join(format!("embedding_{}.csv", stem)), &s)?;
        }
    }
    Ok(())
}
