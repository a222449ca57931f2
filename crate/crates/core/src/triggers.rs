//! Trigger synthesis on raw images, the poisoning functions and the box
//! filter used by the CI baseline.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, PoisonConfig, PoisonMode};
use crate::error::{Error, Result};

/// `H x W x C` image with real-valued pixels in `[0, 255]`, stored HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::domain("image dimensions must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::domain(format!(
                "{}x{}x{} image needs {} pixels, got {}",
                height,
                width,
                channels,
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Pixel at zero-based `(row, col, channel)`.
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.pixels[(row * self.width + col) * self.channels + ch] = value;
    }
}

/// Default 3x3 patch: a {0, 255} checkerboard.
pub const CHECKERBOARD: [[f32; 3]; 3] = [
    [255.0, 0.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 0.0, 255.0],
];

/// Backdoor trigger signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TriggerSpec {
    /// 3x3 pixel pattern that overwrites the image at `origin`
    /// (bottom-right corner when `None`).
    Patch3x3 {
        #[serde(default)]
        origin: Option<(usize, usize)>,
        values: [[f32; 3]; 3],
    },
    /// Horizontal ramp `delta * j / W` for the one-based column `j`.
    Ramp { delta: f64 },
    /// Horizontal sinusoid `delta * sin(2 pi j f / W)`.
    Sinusoid { delta: f64, freq: f64 },
}

impl TriggerSpec {
    pub fn default_patch() -> Self {
        TriggerSpec::Patch3x3 {
            origin: None,
            values: CHECKERBOARD,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TriggerSpec::Patch3x3 { .. } => "patch3x3",
            TriggerSpec::Ramp { .. } => "ramp",
            TriggerSpec::Sinusoid { .. } => "sinusoid",
        }
    }
}

/// A trigger materialised for a given image size.
#[derive(Clone, Debug, PartialEq)]
pub enum Trigger {
    /// Full-frame additive signal, `H x W`, identical across channels.
    Additive { height: usize, width: usize, delta: Vec<f64> },
    /// 3x3 region overwrite at zero-based `(row, col)`.
    Overwrite {
        origin: (usize, usize),
        values: [[f32; 3]; 3],
    },
}

impl Trigger {
    /// Additive value at zero-based `(row, col)`; zero for overwrite triggers.
    pub fn delta_at(&self, row: usize, col: usize) -> f64 {
        match self {
            Trigger::Additive { width, delta, .. } => delta[row * width + col],
            Trigger::Overwrite { .. } => 0.0,
        }
    }

    pub fn apply(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let mut out = image.clone();
        match self {
            Trigger::Additive {
                height,
                width,
                delta,
            } => {
                if *height != image.height || *width != image.width {
                    return Err(Error::domain(format!(
                        "trigger is {}x{} but image is {}x{}",
                        height, width, image.height, image.width
                    )));
                }
                let c = image.channels;
                for (idx, px) in out.pixels.iter_mut().enumerate() {
                    let v = *px as f64 + delta[idx / c];
                    *px = v.clamp(0.0, 255.0) as f32;
                }
            }
            Trigger::Overwrite { origin, values } => {
                let (r0, c0) = *origin;
                if r0 + 3 > image.height || c0 + 3 > image.width {
                    return Err(Error::domain(format!(
                        "3x3 patch at {:?} does not fit a {}x{} image",
                        origin, image.height, image.width
                    )));
                }
                for (dr, row) in values.iter().enumerate() {
                    for (dc, &v) in row.iter().enumerate() {
                        for ch in 0..image.channels {
                            out.set(r0 + dr, c0 + dc, ch, v.clamp(0.0, 255.0));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn make_trigger(spec: &TriggerSpec, height: usize, width: usize) -> Result<Trigger> {
    if height == 0 || width == 0 {
        return Err(Error::domain("image dimensions must be positive"));
    }
    let frame = |f: &dyn Fn(usize) -> f64| {
        let row: Vec<f64> = (1..=width).map(f).collect();
        let mut delta = Vec::with_capacity(height * width);
        for _ in 0..height {
            delta.extend_from_slice(&row);
        }
        Trigger::Additive {
            height,
            width,
            delta,
        }
    };
    match spec {
        TriggerSpec::Ramp { delta } => {
            if !(*delta >= 0.0) {
                return Err(Error::domain("ramp strength must be nonnegative"));
            }
            Ok(frame(&|j| j as f64 * delta / width as f64))
        }
        TriggerSpec::Sinusoid { delta, freq } => {
            if !(*delta >= 0.0) || !(*freq > 0.0) {
                return Err(Error::domain(
                    "sinusoid needs nonnegative strength and positive frequency",
                ));
            }
            Ok(frame(&|j| {
                delta * (2.0 * std::f64::consts::PI * j as f64 * freq / width as f64).sin()
            }))
        }
        TriggerSpec::Patch3x3 { origin, values } => {
            if height < 3 || width < 3 {
                return Err(Error::domain("3x3 patch needs an image of at least 3x3"));
            }
            let origin = origin.unwrap_or((height - 3, width - 3));
            if origin.0 + 3 > height || origin.1 + 3 > width {
                return Err(Error::domain(format!(
                    "3x3 patch at {:?} lies outside a {}x{} image",
                    origin, height, width
                )));
            }
            Ok(Trigger::Overwrite {
                origin,
                values: *values,
            })
        }
    }
}

/// Output of the poisoning function for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonedSample {
    pub image: ImageTensor,
    pub label: ClassId,
    pub origin_label: ClassId,
}

pub fn poison_sample(
    image: &ImageTensor,
    label: ClassId,
    spec: &TriggerSpec,
    target: ClassId,
    mode: PoisonMode,
) -> Result<PoisonedSample> {
    match mode {
        PoisonMode::Corrupted if label == target => {
            return Err(Error::domain(
                "corrupted-label poisoning needs a source outside the target class",
            ))
        }
        PoisonMode::Clean if label != target => {
            return Err(Error::domain(
                "clean-label poisoning needs a source from the target class",
            ))
        }
        _ => {}
    }
    let trigger = make_trigger(spec, image.height, image.width)?;
    Ok(PoisonedSample {
        image: trigger.apply(image)?,
        label: target,
        origin_label: label,
    })
}

/// Labelled image set with poisoning ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub num_classes: usize,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<ClassId>,
    pub poisoned: Vec<bool>,
    pub origin_labels: Vec<Option<ClassId>>,
}

impl ImageDataset {
    pub fn clean(num_classes: usize, images: Vec<ImageTensor>, labels: Vec<ClassId>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::domain("images and labels differ in length"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!("label {} >= {}", bad, num_classes)));
        }
        if let Some(first) = images.first() {
            let shape = (first.height, first.width, first.channels);
            if images
                .iter()
                .any(|im| (im.height, im.width, im.channels) != shape)
            {
                return Err(Error::domain("images must share one shape"));
            }
        }
        let n = images.len();
        Ok(ImageDataset {
            num_classes,
            images,
            labels,
            poisoned: vec![false; n],
            origin_labels: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_indices(&self, class: ClassId) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

/// Number of poisoned samples for a target class of `class_size` samples.
pub fn poison_count(class_size: usize, alpha: f64, mode: PoisonMode) -> usize {
    let n = class_size as f64;
    match mode {
        PoisonMode::Corrupted => (alpha * n / (1.0 - alpha)).round() as usize,
        PoisonMode::Clean => (alpha * n).round() as usize,
    }
}

/// Applies the attack to a clean image set. Corrupted mode appends triggered,
/// relabelled copies of samples drawn from the other classes; clean mode
/// replaces target-class samples with their triggered versions.
pub fn build_poisoned_dataset(
    clean: &ImageDataset,
    cfg: &PoisonConfig,
    seed: u64,
) -> Result<ImageDataset> {
    cfg.validate(clean.num_classes)?;
    if cfg.alpha > 0.55 {
        log::warn!("poisoning ratio {} is above the usual 0.55 ceiling", cfg.alpha);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_idx = clean.class_indices(cfg.target);
    let mut out = clean.clone();
    match cfg.mode {
        PoisonMode::Corrupted => {
            let pool: Vec<usize> = (0..clean.len())
                .filter(|&i| clean.labels[i] != cfg.target)
                .collect();
            let count = poison_count(target_idx.len(), cfg.alpha, cfg.mode);
            if pool.is_empty() || pool.len() < count {
                return Err(Error::domain(format!(
                    "need {} poison sources but only {} non-target samples exist",
                    count,
                    pool.len()
                )));
            }
            let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|k| pool[k])
                .collect();
            chosen.sort_unstable();
            for i in chosen {
                let p = poison_sample(
                    &clean.images[i],
                    clean.labels[i],
                    &cfg.trigger,
                    cfg.target,
                    cfg.mode,
                )?;
                out.images.push(p.image);
                out.labels.push(p.label);
                out.poisoned.push(true);
                out.origin_labels.push(Some(p.origin_label));
            }
        }
        PoisonMode::Clean => {
            let count = poison_count(target_idx.len(), cfg.alpha, cfg.mode);
            if target_idx.is_empty() || count == 0 {
                return Err(Error::domain("target class has no samples to poison"));
            }
            for k in index::sample(&mut rng, target_idx.len(), count) {
                let i = target_idx[k];
                let p = poison_sample(
                    &clean.images[i],
                    clean.labels[i],
                    &cfg.trigger,
                    cfg.target,
                    cfg.mode,
                )?;
                out.images[i] = p.image;
                out.poisoned[i] = true;
                out.origin_labels[i] = Some(p.origin_label);
            }
        }
    }
    Ok(out)
}

/// Per-channel `k x k` box filter with edge replication.
pub fn average_filter(image: &ImageTensor, k: usize) -> Result<ImageTensor> {
    if k % 2 == 0 {
        return Err(Error::domain(format!("filter size {} must be odd", k)));
    }
    if k > image.height.min(image.width) {
        return Err(Error::domain(format!(
            "filter size {} exceeds image size {}x{}",
            k, image.height, image.width
        )));
    }
    let r = (k / 2) as isize;
    let (h, w) = (image.height as isize, image.width as isize);
    let norm = (k * k) as f64;
    let mut out = image.clone();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..image.channels {
                let mut acc = 0.0f64;
                for dr in -r..=r {
                    let rr = (row + dr).clamp(0, h - 1) as usize;
                    for dc in -r..=r {
                        let cc = (col + dc).clamp(0, w - 1) as usize;
                        acc += image.get(rr, cc, ch) as f64;
                    }
                }
                out.set(row as usize, col as usize, ch, (acc / norm) as f32);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerManifest {
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "C")]
    channels: usize,
    num_images: usize,
    num_classes: usize,
    dtype: String,
}

/// Writes `images.bin` (u8, N x H x W x C) plus labels, poison flags and
/// origin labels in the feature-dump conventions.
pub fn write_image_container(dir: &Path, data: &ImageDataset) -> Result<()> {
    let first = data
        .images
        .first()
        .ok_or_else(|| Error::domain("cannot write an empty image container"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ContainerManifest {
        height: first.height,
        width: first.width,
        channels: first.channels,
        num_images: data.len(),
        num_classes: data.num_classes,
        dtype: "u8".into(),
    };
    let mut pixels = Vec::with_capacity(data.len() * first.pixels.len());
    for im in &data.images {
        pixels.extend(im.pixels.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    }
    let labels: Vec<u8> = data
        .labels
        .iter()
        .flat_map(|&l| (l as u32).to_le_bytes())
        .collect();
    let flags: Vec<u8> = data.poisoned.iter().map(|&p| u8::from(p)).collect();
    let origins: Vec<u8> = data
        .origin_labels
        .iter()
        .flat_map(|o| o.map_or(u32::MAX, |c| c as u32).to_le_bytes())
        .collect();
    for (name, bytes) in [
        ("images.bin", pixels),
        ("labels.bin", labels),
        ("poison_flags.bin", flags),
        ("origin_labels.bin", origins),
        (
            "manifest.json",
            serde_json::to_vec_pretty(&manifest)?,
        ),
    ] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_image_container(dir: &Path) -> Result<ImageDataset> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    };
    let manifest: ContainerManifest = serde_json::from_slice(&read("manifest.json")?)
        .map_err(|e| Error::malformed(dir, format!("manifest.json: {}", e)))?;
    let frame = manifest.height * manifest.width * manifest.channels;
    let n = manifest.num_images;
    let pixels = read("images.bin")?;
    let labels = read("labels.bin")?;
    let flags = read("poison_flags.bin")?;
    let origins = read("origin_labels.bin")?;
    if manifest.dtype != "u8"
        || frame == 0
        || pixels.len() != n * frame
        || labels.len() != n * 4
        || flags.len() != n
        || origins.len() != n * 4
    {
        return Err(Error::malformed(dir, "image container sizes disagree with manifest"));
    }
    let word = |b: &[u8], i: usize| u32::from_le_bytes([b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]]);
    let mut out = ImageDataset {
        num_classes: manifest.num_classes,
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        poisoned: Vec::with_capacity(n),
        origin_labels: Vec::with_capacity(n),
    };
    for i in 0..n {
        let px = pixels[i * frame..(i + 1) * frame]
            .iter()
            .map(|&p| p as f32)
            .collect();
        out.images.push(ImageTensor::new(
            manifest.height,
            manifest.width,
            manifest.channels,
            px,
        )?);
        let label = word(&labels, i) as usize;
        if label >= manifest.num_classes || flags[i] > 1 {
            return Err(Error::malformed(dir, format!("bad label or flag at row {}", i)));
        }
        out.labels.push(label);
        out.poisoned.push(flags[i] == 1);
        out.origin_labels.push(match word(&origins, i) {
            u32::MAX => None,
            c => Some(c as usize),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let px = (0..h * w).map(|i| ((i * 7) % 200) as f32).collect();
        ImageTensor::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn ramp_reaches_delta_at_last_column() {
        let t = make_trigger(&TriggerSpec::Ramp { delta: 40.0 }, 28, 28).unwrap();
        assert!((t.delta_at(0, 27) - 40.0).abs() < 1e-12);
        assert!((t.delta_at(13, 0) - 40.0 / 28.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_vanishes_at_half_period() {
        // 2 pi j f / W = pi  with f = 6, W = 24  ->  j = 2 (zero-based col 1)
        let t = make_trigger(&TriggerSpec::Sinusoid { delta: 20.0, freq: 6.0 }, 24, 24).unwrap();
        assert!(t.delta_at(5, 1).abs() < 1e-9);
        // quarter period j = 1: delta * sin(pi/2)
        assert!((t.delta_at(5, 0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn zero_strength_ramp_is_zero() {
        let t = make_trigger(&TriggerSpec::Ramp { delta: 0.0 }, 5, 7).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                assert_eq!(t.delta_at(r, c), 0.0);
            }
        }
    }

    #[test]
    fn additive_triggers_are_constant_along_rows() {
        for spec in [
            TriggerSpec::Ramp { delta: 40.0 },
            TriggerSpec::Sinusoid { delta: 20.0, freq: 6.0 },
        ] {
            let t = make_trigger(&spec, 9, 28).unwrap();
            for c in 0..28 {
                let v = t.delta_at(0, c);
                assert!((1..9).all(|r| t.delta_at(r, c) == v));
            }
        }
    }

    #[test]
    fn patch_must_fit() {
        let spec = TriggerSpec::Patch3x3 {
            origin: Some((26, 0)),
            values: CHECKERBOARD,
        };
        assert!(matches!(make_trigger(&spec, 28, 28), Err(Error::Domain(_))));
        assert!(make_trigger(&TriggerSpec::default_patch(), 2, 28).is_err());
        match make_trigger(&TriggerSpec::default_patch(), 28, 28).unwrap() {
            Trigger::Overwrite { origin, .. } => assert_eq!(origin, (25, 25)),
            _ => panic!("patch should overwrite"),
        }
    }

    #[test]
    fn corrupted_relabels_and_records_origin() {
        let img = gradient_image(28, 28);
        let p = poison_sample(&img, 2, &TriggerSpec::Ramp { delta: 40.0 }, 5, PoisonMode::Corrupted)
            .unwrap();
        assert_eq!(p.label, 5);
        assert_eq!(p.origin_label, 2);
        assert!(poison_sample(&img, 5, &TriggerSpec::Ramp { delta: 40.0 }, 5, PoisonMode::Corrupted)
            .is_err());
    }

    #[test]
    fn clean_label_keeps_label_and_changes_pixels() {
        let img = gradient_image(28, 28);
        let p = poison_sample(&img, 5, &TriggerSpec::default_patch(), 5, PoisonMode::Clean).unwrap();
        assert_eq!(p.label, 5);
        assert_eq!(p.origin_label, 5);
        assert_ne!(p.image, img);
        assert!(poison_sample(&img, 4, &TriggerSpec::default_patch(), 5, PoisonMode::Clean).is_err());
    }

    #[test]
    fn ramp_pixel_difference_matches_trigger() {
        let img = ImageTensor::filled(6, 10, 3, 100.0).unwrap();
        let spec = TriggerSpec::Ramp { delta: 40.0 };
        let p = poison_sample(&img, 1, &spec, 0, PoisonMode::Corrupted).unwrap();
        let t = make_trigger(&spec, 6, 10).unwrap();
        for r in 0..6 {
            for c in 0..10 {
                let j = (c + 1) as f64;
                for ch in 0..3 {
                    let diff = (p.image.get(r, c, ch) - img.get(r, c, ch)) as f64;
                    assert!((diff - j * 40.0 / 10.0).abs() < 1e-4);
                    assert!((diff - t.delta_at(r, c)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn additive_trigger_clamps() {
        let img = ImageTensor::filled(3, 4, 1, 250.0).unwrap();
        let p = poison_sample(&img, 1, &TriggerSpec::Ramp { delta: 40.0 }, 0, PoisonMode::Corrupted)
            .unwrap();
        assert!(p.image.pixels().iter().all(|&v| v <= 255.0));
        let low = ImageTensor::filled(3, 24, 1, 0.0).unwrap();
        let s = poison_sample(
            &low,
            1,
            &TriggerSpec::Sinusoid { delta: 20.0, freq: 6.0 },
            0,
            PoisonMode::Corrupted,
        )
        .unwrap();
        assert!(s.image.pixels().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn patch_is_idempotent() {
        let img = gradient_image(10, 12);
        let spec = TriggerSpec::default_patch();
        let once = poison_sample(&img, 1, &spec, 0, PoisonMode::Corrupted).unwrap();
        let twice = poison_sample(&once.image, 1, &spec, 0, PoisonMode::Corrupted).unwrap();
        assert_eq!(once.image, twice.image);
    }

    fn toy_images(per_class: usize, classes: usize) -> ImageDataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                images.push(ImageTensor::filled(5, 5, 1, (c * 10 + k % 10) as f32).unwrap());
                labels.push(c);
            }
        }
        ImageDataset::clean(classes, images, labels).unwrap()
    }

    #[test]
    fn corrupted_half_doubles_target_class() {
        let clean = toy_images(100, 3);
        let cfg = PoisonConfig {
            target: 1,
            alpha: 0.5,
            mode: PoisonMode::Corrupted,
            trigger: TriggerSpec::default_patch(),
        };
        let out = build_poisoned_dataset(&clean, &cfg, 7).unwrap();
        let idx = out.class_indices(1);
        assert_eq!(idx.len(), 200);
        assert_eq!(idx.iter().filter(|&&i| out.poisoned[i]).count(), 100);
        assert!(out
            .origin_labels
            .iter()
            .zip(&out.poisoned)
            .all(|(o, &p)| p == o.is_some()));
    }

    #[test]
    fn corrupted_count_follows_alpha_definition() {
        // round(6000 * 0.096 / 0.904) = round(637.17) = 637
        assert_eq!(poison_count(6000, 0.096, PoisonMode::Corrupted), 637);
        assert_eq!(poison_count(100, 0.25, PoisonMode::Clean), 25);
    }

    #[test]
    fn clean_label_replaces_in_place() {
        let clean = toy_images(100, 3);
        let cfg = PoisonConfig {
            target: 2,
            alpha: 0.25,
            mode: PoisonMode::Clean,
            trigger: TriggerSpec::default_patch(),
        };
        let out = build_poisoned_dataset(&clean, &cfg, 3).unwrap();
        assert_eq!(out.len(), clean.len());
        let idx = out.class_indices(2);
        assert_eq!(idx.len(), 100);
        assert_eq!(idx.iter().filter(|&&i| out.poisoned[i]).count(), 25);
        assert!(out
            .poisoned
            .iter()
            .zip(&out.labels)
            .all(|(&p, &l)| !p || l == 2));
    }

    #[test]
    fn poisoning_errors() {
        let clean = toy_images(10, 1);
        let cfg = PoisonConfig {
            target: 0,
            alpha: 0.3,
            mode: PoisonMode::Corrupted,
            trigger: TriggerSpec::default_patch(),
        };
        assert!(build_poisoned_dataset(&clean, &cfg, 0).is_err());
        let bad_alpha = PoisonConfig { alpha: 1.0, ..cfg.clone() };
        assert!(build_poisoned_dataset(&toy_images(10, 2), &bad_alpha, 0).is_err());
        let zero = PoisonConfig { alpha: 0.0, ..cfg };
        assert!(build_poisoned_dataset(&toy_images(10, 2), &zero, 0).is_err());
    }

    #[test]
    fn box_filter_keeps_constant_image() {
        let img = ImageTensor::filled(8, 9, 2, 42.0).unwrap();
        let out = average_filter(&img, 5).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 42.0).abs() < 1e-5));
    }

    #[test]
    fn box_filter_spreads_single_pixel() {
        let mut img = ImageTensor::filled(11, 11, 1, 0.0).unwrap();
        img.set(5, 5, 0, 250.0);
        let out = average_filter(&img, 5).unwrap();
        // direct convolution: every pixel within Chebyshev distance 2 sees it once
        for r in 0..11 {
            for c in 0..11 {
                let inside = (r as usize).abs_diff(5) <= 2 && (c as usize).abs_diff(5) <= 2;
                let expected = if inside { 10.0 } else { 0.0 };
                assert!((out.get(r, c, 0) - expected).abs() < 1e-5, "({r},{c})");
            }
        }
    }

    #[test]
    fn box_filter_preserves_ramp_away_from_borders() {
        let base = ImageTensor::filled(12, 20, 1, 0.0).unwrap();
        let ramp = make_trigger(&TriggerSpec::Ramp { delta: 40.0 }, 12, 20)
            .unwrap()
            .apply(&base)
            .unwrap();
        let out = average_filter(&ramp, 5).unwrap();
        for r in 0..12 {
            for c in 2..18 {
                assert!((out.get(r, c, 0) - ramp.get(r, c, 0)).abs() < 1e-4);
            }
        }
        // replicated edge pulls the first column up
        assert!(out.get(0, 0, 0) > ramp.get(0, 0, 0));
    }

    #[test]
    fn box_filter_rejects_bad_sizes() {
        let img = ImageTensor::filled(4, 4, 1, 1.0).unwrap();
        assert!(average_filter(&img, 4).is_err());
        assert!(average_filter(&img, 5).is_err());
    }

    #[test]
    fn image_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clean = toy_images(4, 2);
        let cfg = PoisonConfig {
            target: 0,
            alpha: 0.5,
            mode: PoisonMode::Corrupted,
            trigger: TriggerSpec::default_patch(),
        };
        let data = build_poisoned_dataset(&clean, &cfg, 1).unwrap();
        write_image_container(dir.path(), &data).unwrap();
        let back = read_image_container(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    proptest! {
        #[test]
        fn poisoned_fraction_matches_alpha(
            alpha in 0.01f64..0.55,
            per_class in 20usize..120,
            clean_mode in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let clean = toy_images(per_class, 4);
            let mode = if clean_mode { PoisonMode::Clean } else { PoisonMode::Corrupted };
            let cfg = PoisonConfig { target: 1, alpha, mode, trigger: TriggerSpec::Ramp { delta: 40.0 } };
            match build_poisoned_dataset(&clean, &cfg, seed) {
                Ok(out) => {
                    let idx = out.class_indices(1);
                    let poisoned = idx.iter().filter(|&&i| out.poisoned[i]).count();
                    let frac = poisoned as f64 / idx.len() as f64;
                    prop_assert!((frac - alpha).abs() <= 1.0 / idx.len() as f64 + 1e-12);
                    for c in [0usize, 2, 3] {
                        prop_assert!(out.class_indices(c).iter().all(|&i| !out.poisoned[i]));
                    }
                }
                Err(_) => prop_assert!(clean_mode && poison_count(per_class, alpha, mode) == 0),
            }
        }
    }
}
