//! Feature dump directory: `manifest.json` plus raw little-endian binaries.
//!
//! | file                | contents                                           |
//! |---------------------|----------------------------------------------------|
//! | `features.bin`      | f32, row-major `samples x feature_dim`             |
//! | `labels.bin`        | u32 per sample                                     |
//! | `poison_flags.bin`  | u8 per sample, 0 benign / 1 poisoned               |
//! | `origin_labels.bin` | u32 per sample, `0xFFFFFFFF` when absent           |
//! | `filtered_preds.bin`| u32 per sample, `0xFFFFFFFF` when absent           |
//! | `head.bin`          | u32 layer count, then per layer rows u32, cols u32,|
//! |                     | f32 weights row-major, f32 bias                    |
//!
//! Sample ids are row indices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassifierHead, DenseLayer, FeatureDataset, FeatureSample, Split};
use crate::error::{Error, Result};

const ABSENT: u32 = u32::MAX;

/// Optional provenance block carried in the manifest. Detectors never read it;
/// evaluation uses it to tag records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DumpMeta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_classes: Vec<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<AttackGates>,
}

/// Attack-validity measurements taken when the dump was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackGates {
    /// Benign test accuracy of the backdoored model.
    pub acc: f64,
    /// Benign test accuracy of the model trained without poison.
    pub clean_acc: f64,
    /// Attack success rate per target, in `target_classes` order.
    pub asr: Vec<f64>,
    pub successful: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_samples: usize,
    pub split: Split,
    /// `[rows, cols]` of every head layer, input side first.
    pub head_layers: Vec<[usize; 2]>,
    pub endianness: String,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<DumpMeta>,
}

/// A loaded dump.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    pub manifest: DumpManifest,
    pub dataset: FeatureDataset,
    pub head: ClassifierHead,
}

pub fn write_dump(
    dir: &Path,
    dataset: &FeatureDataset,
    head: &ClassifierHead,
    meta: Option<DumpMeta>,
) -> Result<DumpManifest> {
    if head.input_dim() != dataset.feature_dim() || head.num_classes() != dataset.num_classes() {
        return Err(Error::config(format!(
            "head maps {} -> {} but dataset has d={} and l={}",
            head.input_dim(),
            head.num_classes(),
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = dataset.samples();
    for (row, s) in samples.iter().enumerate() {
        if s.id != row as u64 {
            return Err(Error::config(
                "dump rows are identified by position; sample ids must be 0..n in order",
            ));
        }
    }

    let mut features = Vec::with_capacity(samples.len() * dataset.feature_dim() * 4);
    let mut labels = Vec::with_capacity(samples.len() * 4);
    let mut flags = Vec::with_capacity(samples.len());
    let mut origins = Vec::with_capacity(samples.len() * 4);
    let mut filtered = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        for x in &s.features {
            features.extend_from_slice(&x.to_le_bytes());
        }
        labels.extend_from_slice(&(s.label as u32).to_le_bytes());
        flags.push(u8::from(s.is_poisoned));
        origins.extend_from_slice(&s.origin_label.map_or(ABSENT, |c| c as u32).to_le_bytes());
        filtered.extend_from_slice(
            &s.filtered_prediction
                .map_or(ABSENT, |c| c as u32)
                .to_le_bytes(),
        );
    }

    let mut head_bytes = Vec::new();
    head_bytes.extend_from_slice(&(head.layers().len() as u32).to_le_bytes());
    for layer in head.layers() {
        head_bytes.extend_from_slice(&(layer.rows as u32).to_le_bytes());
        head_bytes.extend_from_slice(&(layer.cols as u32).to_le_bytes());
        for w in layer.weights.iter().chain(&layer.bias) {
            head_bytes.extend_from_slice(&w.to_le_bytes());
        }
    }

    let manifest = DumpManifest {
        num_classes: dataset.num_classes(),
        feature_dim: dataset.feature_dim(),
        num_samples: samples.len(),
        split: dataset.split(),
        head_layers: head.layers().iter().map(|l| [l.rows, l.cols]).collect(),
        endianness: "little".into(),
        dtype: "f32".into(),
        meta,
    };

    write_file(&dir.join("features.bin"), &features)?;
    write_file(&dir.join("labels.bin"), &labels)?;
    write_file(&dir.join("poison_flags.bin"), &flags)?;
    write_file(&dir.join("origin_labels.bin"), &origins)?;
    write_file(&dir.join("filtered_preds.bin"), &filtered)?;
    write_file(&dir.join("head.bin"), &head_bytes)?;
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::malformed(dir, format!("missing {}", name))
        } else {
            Error::io(&path, e)
        }
    })
}

fn u32s(bytes: &[u8]) -> impl Iterator<Item = u32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

fn expect_len(dir: &Path, name: &str, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::malformed(
            dir,
            format!("{} has {} bytes, expected {}", name, bytes.len(), expected),
        ));
    }
    Ok(())
}

fn optional_class(
    dir: &Path,
    name: &str,
    raw: u32,
    num_classes: usize,
) -> Result<Option<ClassId>> {
    match raw {
        ABSENT => Ok(None),
        c if (c as usize) < num_classes => Ok(Some(c as usize)),
        c => Err(Error::malformed(
            dir,
            format!("{} contains class {} >= {}", name, c, num_classes),
        )),
    }
}

/// Loads and validates a dump. Any inconsistency with the manifest is reported
/// as [`Error::MalformedDump`].
pub fn read_dump(dir: &Path) -> Result<FeatureDump> {
    let manifest_bytes = read_file(dir, "manifest.json")?;
    let manifest: DumpManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::malformed(dir, format!("manifest.json: {}", e)))?;
    if manifest.endianness != "little" {
        return Err(Error::malformed(
            dir,
            format!("unsupported endianness {:?}", manifest.endianness),
        ));
    }
    if manifest.dtype != "f32" {
        return Err(Error::malformed(
            dir,
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    let n = manifest.num_samples;
    let d = manifest.feature_dim;
    let l = manifest.num_classes;
    if d == 0 || l == 0 {
        return Err(Error::malformed(dir, "feature_dim and num_classes must be positive"));
    }

    let features = read_file(dir, "features.bin")?;
    expect_len(dir, "features.bin", &features, n * d * 4)?;
    let labels = read_file(dir, "labels.bin")?;
    expect_len(dir, "labels.bin", &labels, n * 4)?;
    let flags = read_file(dir, "poison_flags.bin")?;
    expect_len(dir, "poison_flags.bin", &flags, n)?;
    let origins = read_file(dir, "origin_labels.bin")?;
    expect_len(dir, "origin_labels.bin", &origins, n * 4)?;
    let filtered = read_file(dir, "filtered_preds.bin")?;
    expect_len(dir, "filtered_preds.bin", &filtered, n * 4)?;

    let head = parse_head(dir, &read_file(dir, "head.bin")?)?;
    let shapes: Vec<[usize; 2]> = head.layers().iter().map(|l| [l.rows, l.cols]).collect();
    if shapes != manifest.head_layers {
        return Err(Error::malformed(
            dir,
            format!(
                "head.bin layer shapes {:?} disagree with manifest {:?}",
                shapes, manifest.head_layers
            ),
        ));
    }
    if head.input_dim() != d || head.num_classes() != l {
        return Err(Error::malformed(
            dir,
            format!(
                "head maps {} -> {} but manifest declares d={} l={}",
                head.input_dim(),
                head.num_classes(),
                d,
                l
            ),
        ));
    }

    let all_features: Vec<f32> = f32s(&features).collect();
    let mut samples = Vec::with_capacity(n);
    for (row, (((label, &flag), origin), filt)) in u32s(&labels)
        .zip(&flags)
        .zip(u32s(&origins))
        .zip(u32s(&filtered))
        .enumerate()
    {
        if label as usize >= l {
            return Err(Error::malformed(
                dir,
                format!("row {} has label {} >= {}", row, label, l),
            ));
        }
        let is_poisoned = match flag {
            0 => false,
            1 => true,
            other => {
                return Err(Error::malformed(
                    dir,
                    format!("row {} has poison flag {}", row, other),
                ))
            }
        };
        let feats = all_features[row * d..(row + 1) * d].to_vec();
        if let Some(bad) = feats.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::malformed(
                dir,
                format!("row {} has feature value {}", row, bad),
            ));
        }
        samples.push(FeatureSample {
            id: row as u64,
            features: feats,
            label: label as usize,
            is_poisoned,
            origin_label: optional_class(dir, "origin_labels.bin", origin, l)?,
            filtered_prediction: optional_class(dir, "filtered_preds.bin", filt, l)?,
        });
    }
    let dataset = FeatureDataset::new(samples, l, d, manifest.split)
        .map_err(|e| Error::malformed(dir, e.to_string()))?;
    Ok(FeatureDump {
        manifest,
        dataset,
        head,
    })
}

fn parse_head(dir: &Path, bytes: &[u8]) -> Result<ClassifierHead> {
    let bad = |reason: String| Error::malformed(dir, format!("head.bin: {}", reason));
    let mut cursor = 0usize;
    let take_u32 = |cursor: &mut usize| -> Result<u32> {
        let end = *cursor + 4;
        let chunk = bytes
            .get(*cursor..end)
            .ok_or_else(|| bad("truncated".into()))?;
        *cursor = end;
        Ok(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    };
    let count = take_u32(&mut cursor)? as usize;
    if count == 0 {
        return Err(bad("zero layers".into()));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = take_u32(&mut cursor)? as usize;
        let cols = take_u32(&mut cursor)? as usize;
        let n_weights = rows
            .checked_mul(cols)
            .and_then(|w| w.checked_add(rows))
            .ok_or_else(|| bad("layer shape overflow".into()))?;
        let end = cursor + n_weights * 4;
        let chunk = bytes
            .get(cursor..end)
            .ok_or_else(|| bad("truncated layer".into()))?;
        cursor = end;
        let values: Vec<f32> = f32s(chunk).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite weight".into()));
        }
        let (w, b) = values.split_at(rows * cols);
        layers.push(DenseLayer::new(rows, cols, w.to_vec(), b.to_vec()).map_err(|e| bad(e.to_string()))?);
    }
    if cursor != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    ClassifierHead::new(layers).map_err(|e| bad(e.to_string()))
}
