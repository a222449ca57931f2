//! Feature-space benchmark with a known backdoor: Gaussian class modes, a
//! trigger direction orthogonal to every class mean, and a linear
//! nearest-mean head whose target logit also reads the trigger direction.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::data::{
    write_dump, AttackGates, ClassId, ClassifierHead, DenseLayer, DumpMeta, FeatureDataset,
    FeatureSample, PoisonMode, Split,
};
use crate::detector::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{attack_successful, head_acc, head_asr};
use crate::triggers::poison_count;

/// One Gaussian mode of every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub weight: f64,
    /// Offset along the class's own mean direction, drawn uniformly per
    /// class from `[shift[0], shift[1]]`.
    pub shift: [f64; 2],
    /// Length of an offset orthogonal to all class means and triggers.
    pub orthogonal: f64,
}

impl ModeSpec {
    pub fn main(weight: f64) -> Self {
        ModeSpec {
            weight,
            shift: [0.0, 0.0],
            orthogonal: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub target: ClassId,
    pub alpha: f64,
    /// Trigger strength `c` along the trigger direction.
    pub strength: f64,
    /// When set, the averaging filter leaves the trigger intact.
    pub filter_invariant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub noise_sd: f64,
    /// Distance of each class mean from the common floor along its own axis.
    pub separation: f64,
    /// Common offset added to every coordinate so that the Gaussians sit
    /// well above zero before clipping.
    pub floor: f64,
    pub modes: Vec<ModeSpec>,
    pub attacks: Vec<AttackSpec>,
    pub label_mode: PoisonMode,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Rate at which filtering changes the prediction of a benign sample.
    pub filter_flip_rate: f64,
    /// Backdoor weight is this factor times the smallest sufficient weight.
    pub backdoor_margin: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 10,
            dim: 64,
            noise_sd: 1.0,
            separation: 12.0,
            floor: 4.0,
            modes: vec![
                ModeSpec::main(0.94),
                ModeSpec {
                    weight: 0.06,
                    shift: [13.3, 16.0],
                    orthogonal: 0.0,
                },
            ],
            attacks: Vec::new(),
            label_mode: PoisonMode::Corrupted,
            train_per_class: 500,
            val_per_class: 1000,
            test_per_class: 200,
            filter_flip_rate: 0.02,
            backdoor_margin: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn with_attack(mut self, target: ClassId, alpha: f64) -> Self {
        self.attacks.push(AttackSpec {
            target,
            alpha,
            strength: 120.0 * self.noise_sd,
            filter_invariant: false,
        });
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_classes;
        if l < 2 {
            return Err(Error::config("at least two classes are needed"));
        }
        let orth_needed = self.modes.iter().any(|m| m.orthogonal != 0.0);
        let needed = l + 1 + self.attacks.len() + usize::from(orth_needed);
        if self.dim < needed {
            return Err(Error::config(format!(
                "dimension {} too small: {} classes and {} triggers need at least {}",
                self.dim,
                l,
                self.attacks.len(),
                needed
            )));
        }
        if !(self.noise_sd > 0.0) || !(self.separation > 0.0) || self.floor < 0.0 {
            return Err(Error::config("noise, separation and floor must be positive"));
        }
        if self.floor < 3.0 * self.noise_sd {
            log::warn!("floor below three noise deviations; clipping will distort the modes");
        }
        if self.modes.is_empty() {
            return Err(Error::config("every class needs at least one mode"));
        }
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if self.modes.iter().any(|m| !(m.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mode weights must be positive and sum to 1 (got {})",
                total
            )));
        }
        if self.modes.iter().any(|m| m.shift[0] > m.shift[1]) {
            return Err(Error::config("mode shift range is reversed"));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("every split needs samples"));
        }
        if !(0.0..=1.0).contains(&self.filter_flip_rate) {
            return Err(Error::config("filter flip rate outside [0, 1]"));
        }
        if !(self.backdoor_margin > 1.0) {
            return Err(Error::config("backdoor margin factor must exceed 1"));
        }
        let mut targets = Vec::new();
        for a in &self.attacks {
            if a.target >= l {
                return Err(Error::config(format!("target {} out of range", a.target)));
            }
            if targets.contains(&a.target) {
                return Err(Error::config(format!("target {} attacked twice", a.target)));
            }
            targets.push(a.target);
            if !(a.alpha > 0.0 && a.alpha <= 0.55) {
                return Err(Error::config(format!(
                    "poisoning ratio {} outside (0, 0.55]",
                    a.alpha
                )));
            }
            if !(a.strength > 0.0) {
                return Err(Error::config("trigger strength must be positive"));
            }
        }
        Ok(())
    }
}

/// Everything generated for one configuration.
#[derive(Clone, Debug)]
pub struct SyntheticBundle {
    pub config: SyntheticConfig,
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    /// Benign test samples of every class.
    pub test: FeatureDataset,
    /// Per attack: triggered copies of the non-target test samples, labelled
    /// with their true class.
    pub triggered_test: Vec<FeatureDataset>,
    pub head: ClassifierHead,
    /// Head of the same model without the backdoor.
    pub clean_head: ClassifierHead,
    pub class_means: Vec<Vec<f64>>,
    /// Per class, per mode.
    pub mode_means: Vec<Vec<Vec<f64>>>,
    pub trigger_directions: Vec<Vec<f64>>,
    pub backdoor_weights: Vec<f64>,
}

impl SyntheticBundle {
    pub fn targets(&self) -> Vec<ClassId> {
        self.config.attacks.iter().map(|a| a.target).collect()
    }

    /// Benign accuracy of both heads and per-target attack success.
    pub fn gates(&self) -> Result<AttackGates> {
        let acc = head_acc(&self.head, &self.test)?;
        let clean_acc = head_acc(&self.clean_head, &self.test)?;
        let asr = self
            .triggered_test
            .iter()
            .zip(&self.config.attacks)
            .map(|(t, a)| head_asr(&self.head, t, a.target))
            .collect::<Result<Vec<_>>>()?;
        let successful = asr.iter().all(|&r| attack_successful(r, acc, clean_acc));
        Ok(AttackGates {
            acc,
            clean_acc,
            asr,
            successful,
        })
    }

    pub fn meta(&self) -> Result<DumpMeta> {
        let attacked = !self.config.attacks.is_empty();
        let mode = match self.config.label_mode {
            PoisonMode::Corrupted => "corrupted",
            PoisonMode::Clean => "clean",
        };
        Ok(DumpMeta {
            target_classes: self.targets(),
            alpha: self.config.attacks.first().map(|a| a.alpha),
            mode: attacked.then(|| mode.to_string()),
            trigger: attacked.then(|| "synthetic".to_string()),
            seed: Some(self.config.seed),
            note: None,
            gates: if attacked { Some(self.gates()?) } else { None },
        })
    }

    /// Writes `train/`, `val/`, `test/` and one `triggered_<k>/` per attack.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let meta = self.meta()?;
        write_dump(&dir.join("train"), &self.train, &self.head, Some(meta.clone()))?;
        write_dump(&dir.join("val"), &self.val, &self.head, Some(meta.clone()))?;
        write_dump(&dir.join("test"), &self.test, &self.head, Some(meta.clone()))?;
        for (k, t) in self.triggered_test.iter().enumerate() {
            write_dump(&dir.join(format!("triggered_{}", k)), t, &self.head, Some(meta.clone()))?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes from `v` its components along the orthonormal `basis`, twice for
/// numerical safety, and normalises. `None` when `v` lies in the span.
fn orthonormalise(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let norm = dot(&v, &v).sqrt();
    (norm > 1e-9).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Splits `n` by `weights` with largest remainders (ties: lower index).
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &m in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[m] += 1;
        rest -= 1;
    }
    counts
}

struct Geometry {
    class_means: Vec<Vec<f64>>,
    mode_means: Vec<Vec<Vec<f64>>>,
    triggers: Vec<Vec<f64>>,
}

fn geometry(cfg: &SyntheticConfig) -> Result<Geometry> {
    let (l, d) = (cfg.num_classes, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let class_means: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let mut m = vec![cfg.floor; d];
            m[i] += cfg.separation;
            m
        })
        .collect();
    // Mode means move along the class axes, so the span of all mode means
    // is covered by the class means plus those axes.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for m in &class_means {
        let b = orthonormalise(m.clone(), &basis)
            .ok_or_else(|| Error::config("class means are linearly dependent"))?;
        basis.push(b);
    }
    for i in 0..l {
        let mut axis = vec![0.0; d];
        axis[i] = 1.0;
        if let Some(b) = orthonormalise(axis, &basis) {
            basis.push(b);
        }
    }
    let mut triggers = Vec::new();
    for a in 0..cfg.attacks.len() {
        let mut seed = vec![0.0; d];
        seed[l + a] = 1.0;
        let t = orthonormalise(seed, &basis)
            .ok_or_else(|| Error::config("no room for an orthogonal trigger direction"))?;
        basis.push(t.clone());
        triggers.push(t);
    }
    let mode_means = class_means
        .iter()
        .enumerate()
        .map(|(i, mean)| {
            cfg.modes
                .iter()
                .map(|mode| {
                    let shift = if mode.shift[1] > mode.shift[0] {
                        rng.random_range(mode.shift[0]..=mode.shift[1])
                    } else {
                        mode.shift[0]
                    };
                    let mut m = mean.clone();
                    m[i] += shift;
                    if mode.orthogonal != 0.0 {
                        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                        let u = orthonormalise(v, &basis)
                            .ok_or_else(|| Error::config("no room for orthogonal modes"))?;
                        m.iter_mut().zip(&u).for_each(|(x, y)| *x += mode.orthogonal * y);
                    }
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Geometry {
        class_means,
        mode_means,
        triggers,
    })
}

fn draw(mean: &[f64], sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            (m + sd * z).max(0.0)
        })
        .collect()
}

fn add_trigger(v: &[f64], dir: &[f64], strength: f64) -> Vec<f64> {
    v.iter().zip(dir).map(|(x, e)| (x + strength * e).max(0.0)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Benign draws for one class, mode by mode, then shuffled.
fn draw_class(geo: &Geometry, cfg: &SyntheticConfig, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let weights: Vec<f64> = cfg.modes.iter().map(|m| m.weight).collect();
    let counts = allocate(n, &weights);
    let mut out = Vec::with_capacity(n);
    for (m, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.push(draw(&geo.mode_means[class][m], cfg.noise_sd, rng));
        }
    }
    // Fisher-Yates so that ids do not reveal the mode.
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// One draw from the class mixture.
fn draw_mixture(geo: &Geometry, cfg: &SyntheticConfig, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut mode = cfg.modes.len() - 1;
    for (m, spec) in cfg.modes.iter().enumerate() {
        acc += spec.weight;
        if u < acc {
            mode = m;
            break;
        }
    }
    draw(&geo.mode_means[class][mode], cfg.noise_sd, rng)
}

fn linear_head(weights: &[Vec<f64>], bias: &[f64]) -> Result<ClassifierHead> {
    let rows = weights.len();
    let cols = weights[0].len();
    let w: Vec<f32> = weights.iter().flat_map(|r| r.iter().map(|&x| x as f32)).collect();
    let b: Vec<f32> = bias.iter().map(|&x| x as f32).collect();
    ClassifierHead::new(vec![DenseLayer::new(rows, cols, w, b)?])
}

struct RawSample {
    features: Vec<f64>,
    label: ClassId,
    poisoned: bool,
    origin: Option<ClassId>,
    /// Features before the trigger was added.
    pre_trigger: Option<Vec<f64>>,
    attack: Option<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBundle> {
    cfg.validate()?;
    let geo = geometry(cfg)?;
    let l = cfg.num_classes;

    // Benign draws use their own streams so that the attack settings never
    // change the benign part of the data.
    let mut train_raw: Vec<RawSample> = Vec::new();
    let mut val_raw: Vec<Vec<f64>> = Vec::new();
    let mut val_labels = Vec::new();
    let mut test_raw: Vec<Vec<f64>> = Vec::new();
    let mut test_labels = Vec::new();
    for c in 0..l {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100 + c as u64));
        for v in draw_class(&geo, cfg, c, cfg.train_per_class, &mut rng) {
            train_raw.push(RawSample {
                features: v,
                label: c,
                poisoned: false,
                origin: None,
                pre_trigger: None,
                attack: None,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 200 + c as u64));
        for v in draw_class(&geo, cfg, c, cfg.val_per_class, &mut rng) {
            val_raw.push(v);
            val_labels.push(c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 300 + c as u64));
        for v in draw_class(&geo, cfg, c, cfg.test_per_class, &mut rng) {
            test_raw.push(v);
            test_labels.push(c);
        }
    }

    let mut poison_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 400));
    for (a, attack) in cfg.attacks.iter().enumerate() {
        let dir = &geo.triggers[a];
        let t = attack.target;
        match cfg.label_mode {
            PoisonMode::Corrupted => {
                let n = poison_count(cfg.train_per_class, attack.alpha, PoisonMode::Corrupted);
                for _ in 0..n {
                    let mut origin = poison_rng.random_range(0..l - 1);
                    if origin >= t {
                        origin += 1;
                    }
                    let pre = draw_mixture(&geo, cfg, origin, &mut poison_rng);
                    train_raw.push(RawSample {
                        features: add_trigger(&pre, dir, attack.strength),
                        label: t,
                        poisoned: true,
                        origin: Some(origin),
                        pre_trigger: Some(pre),
                        attack: Some(a),
                    });
                }
            }
            PoisonMode::Clean => {
                let n = poison_count(cfg.train_per_class, attack.alpha, PoisonMode::Clean);
                let members: Vec<usize> = (0..train_raw.len())
                    .filter(|&i| train_raw[i].label == t && !train_raw[i].poisoned)
                    .collect();
                let mut chosen: Vec<usize> = sample_indices(&mut poison_rng, members.len(), n)
                    .into_iter()
                    .map(|k| members[k])
                    .collect();
                chosen.sort_unstable();
                for i in chosen {
                    let s = &mut train_raw[i];
                    let pre = std::mem::take(&mut s.features);
                    s.features = add_trigger(&pre, dir, attack.strength);
                    s.poisoned = true;
                    s.origin = Some(t);
                    s.pre_trigger = Some(pre);
                    s.attack = Some(a);
                }
            }
        }
    }

    // Triggered test copies of the non-target benign test samples.
    let triggered_raw: Vec<Vec<(Vec<f64>, ClassId)>> = cfg
        .attacks
        .iter()
        .enumerate()
        .map(|(a, attack)| {
            test_raw
                .iter()
                .zip(&test_labels)
                .filter(|(_, &c)| c != attack.target)
                .map(|(v, &c)| (add_trigger(v, &geo.triggers[a], attack.strength), c))
                .collect()
        })
        .collect();

    // Clean head: nearest class mean.
    let bias: Vec<f64> = geo.class_means.iter().map(|m| -0.5 * dot(m, m)).collect();
    let clean_logits = |v: &[f64]| -> Vec<f64> {
        geo.class_means.iter().zip(&bias).map(|(m, b)| dot(m, v) + b).collect()
    };
    let mut weights = geo.class_means.clone();
    let mut gammas = Vec::new();
    for (a, attack) in cfg.attacks.iter().enumerate() {
        let t = attack.target;
        let dir = &geo.triggers[a];
        let mut needed: f64 = 0.0;
        let poisoned_train = train_raw
            .iter()
            .filter(|s| s.attack == Some(a))
            .map(|s| s.features.as_slice());
        let triggered = triggered_raw[a].iter().map(|(v, _)| v.as_slice());
        for v in poisoned_train.chain(triggered) {
            let z = dot(v, dir);
            if z <= 0.0 {
                return Err(Error::config(format!(
                    "trigger {} leaves a sample with no component along its direction",
                    a
                )));
            }
            let lg = clean_logits(v);
            let gap = (0..l)
                .filter(|&k| k != t)
                .map(|k| lg[k] - lg[t])
                .fold(f64::NEG_INFINITY, f64::max);
            needed = needed.max(gap / z);
        }
        let gamma = cfg.backdoor_margin * needed.max(0.0);
        weights[t].iter_mut().zip(dir).for_each(|(w, e)| *w += gamma * e);
        gammas.push(gamma);
    }
    let head = linear_head(&weights, &bias)?;
    let clean_head = linear_head(&geo.class_means, &bias)?;

    for (a, attack) in cfg.attacks.iter().enumerate() {
        let misses = triggered_raw[a]
            .iter()
            .filter(|(v, _)| head.classify_unchecked(v) != attack.target)
            .count();
        if misses > 0 {
            return Err(Error::config(format!(
                "trigger {} does not reach target {} on {} test samples (backdoor weight {:.3})",
                a, attack.target, misses, gammas[a]
            )));
        }
    }
    let wrong = test_raw
        .iter()
        .zip(&test_labels)
        .filter(|(v, &c)| head.classify_unchecked(v) != c)
        .count();
    let acc = 1.0 - wrong as f64 / test_raw.len() as f64;
    if acc < 0.99 {
        return Err(Error::config(format!(
            "benign accuracy {:.4} below 0.99; class margins are too small for the backdoor weights {:?}",
            acc, gammas
        )));
    }

    let mut flip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 500));
    let filtered = |v: &[f64], rng: &mut ChaCha8Rng| -> ClassId {
        let p = head.classify_unchecked(v);
        if rng.random::<f64>() < cfg.filter_flip_rate {
            let mut other = rng.random_range(0..l - 1);
            if other >= p {
                other += 1;
            }
            other
        } else {
            p
        }
    };

    let mut id = 0u64;
    let mut train = Vec::with_capacity(train_raw.len());
    for s in &train_raw {
        let fp = match (&s.pre_trigger, s.attack) {
            (Some(pre), Some(a)) => {
                if cfg.attacks[a].filter_invariant {
                    head.classify_unchecked(&s.features)
                } else {
                    head.classify_unchecked(pre)
                }
            }
            _ => filtered(&s.features, &mut flip_rng),
        };
        train.push(FeatureSample {
            id,
            features: to_f32(&s.features),
            label: s.label,
            is_poisoned: s.poisoned,
            origin_label: s.origin,
            filtered_prediction: Some(fp),
        });
        id += 1;
    }
    let build = |rows: &[Vec<f64>], labels: &[ClassId], split, rng: &mut ChaCha8Rng| {
        let samples = rows
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (v, &c))| FeatureSample {
                id: i as u64,
                features: to_f32(v),
                label: c,
                is_poisoned: false,
                origin_label: None,
                filtered_prediction: Some(filtered(v, rng)),
            })
            .collect();
        FeatureDataset::new(samples, l, cfg.dim, split)
    };
    let val = build(&val_raw, &val_labels, Split::Validation, &mut flip_rng)?;
    let test = build(&test_raw, &test_labels, Split::Test, &mut flip_rng)?;
    let triggered_test = triggered_raw
        .iter()
        .map(|rows| {
            let samples = rows
                .iter()
                .enumerate()
                .map(|(i, (v, c))| FeatureSample {
                    id: i as u64,
                    features: to_f32(v),
                    label: *c,
                    is_poisoned: true,
                    origin_label: Some(*c),
                    filtered_prediction: None,
                })
                .collect();
            FeatureDataset::new(samples, l, cfg.dim, Split::Test)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticBundle {
        config: cfg.clone(),
        train: FeatureDataset::new(train, l, cfg.dim, Split::Train)?,
        val,
        test,
        triggered_test,
        head,
        clean_head,
        class_means: geo.class_means,
        mode_means: geo.mode_means,
        trigger_directions: geo.triggers,
        backdoor_weights: gammas,
    })
}
