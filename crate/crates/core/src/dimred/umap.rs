//! UMAP: exact k-NN graph, fuzzy simplicial set, SGD layout with negative
//! sampling.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dimred::{check_finite, fit_kernel_params, knn_graph, pca_reduce, KnnGraph, ReductionConfig};
use crate::error::{Error, Result};

const BANDWIDTH_TOL: f64 = 1e-9;
const BANDWIDTH_ITERS: usize = 200;
const INIT_JITTER: f64 = 1e-4;

/// Per-point bandwidths `sigma` and local offsets `rho` such that
/// `sum_j exp(-max(0, d_ij - rho_i) / sigma_i) = log2(k)` over the k
/// neighbours of each point.
pub fn smooth_knn_distances(graph: &KnnGraph) -> (Vec<f64>, Vec<f64>) {
    let target = (graph.k as f64).log2();
    let n = graph.len();
    let mut sigmas = Vec::with_capacity(n);
    let mut rhos = Vec::with_capacity(n);
    for i in 0..n {
        let dists = graph.neighbor_distances(i);
        let rho = dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
        let membership_sum = |sigma: f64| -> f64 {
            dists
                .iter()
                .map(|&d| (-(d - rho).max(0.0) / sigma).exp())
                .sum()
        };
        let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..BANDWIDTH_ITERS {
            let s = membership_sum(mid);
            if (s - target).abs() < BANDWIDTH_TOL {
                break;
            }
            if s > target {
                hi = mid;
                mid = (lo + hi) / 2.0;
            } else {
                lo = mid;
                if hi.is_infinite() {
                    mid *= 2.0;
                } else {
                    mid = (lo + hi) / 2.0;
                }
            }
        }
        if !(mid > 0.0) || !mid.is_finite() {
            // every neighbour sits at distance rho; memberships are all 1
            mid = 1.0;
        }
        sigmas.push(mid);
        rhos.push(rho);
    }
    (sigmas, rhos)
}

/// Symmetrised fuzzy membership graph as an undirected edge list (`i < j`).
#[derive(Clone, Debug)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
}

pub fn fuzzy_graph(x: &Array2<f64>, n_neighbors: usize) -> Result<FuzzyGraph> {
    let knn = knn_graph(x, n_neighbors)?;
    let (sigmas, rhos) = smooth_knn_distances(&knn);
    let mut pairs: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    for i in 0..knn.len() {
        for (&j, &d) in knn.neighbors(i).iter().zip(knn.neighbor_distances(i)) {
            let w = (-(d - rhos[i]).max(0.0) / sigmas[i]).exp();
            let entry = pairs.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = w;
            } else {
                entry.1 = w;
            }
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|((i, j), (a, b))| (i, j, a + b - a * b))
        .filter(|e| e.2 > 0.0)
        .collect();
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    Ok(FuzzyGraph {
        n: x.nrows(),
        edges,
        sigmas,
        rhos,
    })
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// Embeds the rows of `x` into `cfg.target_dim` dimensions. Deterministic
/// for a fixed seed.
pub fn umap_reduce(x: &Array2<f64>, cfg: &ReductionConfig) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n <= cfg.n_neighbors {
        return Err(Error::domain(format!(
            "UMAP needs more points ({}) than neighbours ({})",
            n, cfg.n_neighbors
        )));
    }
    if cfg.target_dim == 0 || cfg.target_dim >= d {
        return Err(Error::domain(format!(
            "target dimension {} must be in 1..{}",
            cfg.target_dim, d
        )));
    }
    if cfg.n_neighbors < 2 || cfg.epochs == 0 {
        return Err(Error::domain("UMAP needs n_neighbors >= 2 and epochs >= 1"));
    }
    check_finite(x)?;
    let (a, b) = fit_kernel_params(cfg.min_dist, cfg.spread)?;
    let graph = fuzzy_graph(x, cfg.n_neighbors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut emb = initial_layout(x, cfg.target_dim, &mut rng)?;
    optimize_layout(&mut emb, &graph, a, b, cfg, &mut rng);
    Ok(emb)
}

/// PCA coordinates rescaled to `[0, 10]` per axis plus a small jitter.
fn initial_layout(x: &Array2<f64>, dim: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let mut emb = pca_reduce(x, dim)?.embedding;
    let jitter = Normal::new(0.0, INIT_JITTER).expect("valid normal");
    for mut col in emb.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in col.iter_mut() {
            *v = if span > 0.0 { 10.0 * (*v - lo) / span } else { 0.0 };
        }
    }
    emb.iter_mut().for_each(|v| *v += jitter.sample(rng));
    Ok(emb)
}

fn optimize_layout(
    emb: &mut Array2<f64>,
    graph: &FuzzyGraph,
    a: f64,
    b: f64,
    cfg: &ReductionConfig,
    rng: &mut ChaCha8Rng,
) {
    let n_epochs = cfg.epochs;
    let dim = emb.ncols();
    let n = graph.n;
    let max_w = graph.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    if max_w <= 0.0 {
        return;
    }
    // both directions of each undirected edge, as in the symmetric matrix
    let mut heads = Vec::new();
    let mut tails = Vec::new();
    let mut per_sample = Vec::new();
    for &(i, j, w) in &graph.edges {
        if w < max_w / n_epochs as f64 {
            continue;
        }
        for (h, t) in [(i, j), (j, i)] {
            heads.push(h);
            tails.push(t);
            per_sample.push(max_w / w);
        }
    }
    let neg_rate = cfg.negative_sample_rate as f64;
    let per_negative: Vec<f64> = per_sample.iter().map(|e| e / neg_rate).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();

    let data = emb.as_slice_mut().expect("standard layout");
    let mut alpha = cfg.learning_rate;
    let mut cur = vec![0.0; dim];
    for epoch in 0..n_epochs {
        let e = epoch as f64;
        for edge in 0..heads.len() {
            if next_sample[edge] > e {
                continue;
            }
            let j = heads[edge];
            let k = tails[edge];
            let dist_sq: f64 = (0..dim)
                .map(|c| {
                    let diff = data[j * dim + c] - data[k * dim + c];
                    diff * diff
                })
                .sum();
            let coeff = if dist_sq > 0.0 {
                let pb = dist_sq.powf(b);
                -2.0 * a * b * (pb / dist_sq) / (a * pb + 1.0)
            } else {
                0.0
            };
            for c in 0..dim {
                let grad = clip(coeff * (data[j * dim + c] - data[k * dim + c]));
                data[j * dim + c] += grad * alpha;
                data[k * dim + c] -= grad * alpha;
            }
            next_sample[edge] += per_sample[edge];

            let n_neg = ((e - next_negative[edge]) / per_negative[edge]).floor().max(0.0) as usize;
            cur.copy_from_slice(&data[j * dim..(j + 1) * dim]);
            for _ in 0..n_neg {
                let other = rng.random_range(0..n);
                let dist_sq: f64 = (0..dim)
                    .map(|c| {
                        let diff = cur[c] - data[other * dim + c];
                        diff * diff
                    })
                    .sum();
                let coeff = if dist_sq > 0.0 {
                    2.0 * b / ((0.001 + dist_sq) * (a * dist_sq.powf(b) + 1.0))
                } else if other == j {
                    continue;
                } else {
                    0.0
                };
                for c in 0..dim {
                    let grad = if coeff > 0.0 {
                        clip(coeff * (cur[c] - data[other * dim + c]))
                    } else {
                        4.0
                    };
                    cur[c] += grad * alpha;
                }
            }
            data[j * dim..(j + 1) * dim].copy_from_slice(&cur);
            next_negative[edge] += n_neg as f64 * per_negative[edge];
        }
        alpha = cfg.learning_rate * (1.0 - (epoch + 1) as f64 / n_epochs as f64);
    }
}
