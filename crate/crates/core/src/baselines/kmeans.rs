//! Lloyd's K-means with k-means++ seeding and seeded restarts.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detector::derive_seed;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 2,
            restarts: 50,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

impl KMeansFit {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centers.nrows()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn plus_plus_init(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Array2<f64>, centers: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, l) in labels.iter_mut().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..centers.nrows() {
            let d = sq_dist(x.row(i), centers.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        *l = best.1;
        inertia += best.0;
    }
    inertia
}

fn lloyd(x: &Array2<f64>, k: usize, max_iter: usize, seed: u64) -> KMeansFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(x, k, &mut rng);
    let n = x.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut prev = labels.clone();
    let mut history = Vec::new();
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        inertia = assign(x, &centers, &mut labels);
        history.push(inertia);
        if labels == prev {
            break;
        }
        prev.clone_from(&labels);
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
            // An empty cluster keeps its previous center, which never
            // raises the objective.
        }
    }
    KMeansFit {
        labels,
        centers,
        inertia,
        history,
    }
}

/// Best of `restarts` seeded runs; ties keep the earliest restart.
pub fn kmeans(x: &Array2<f64>, params: &KMeansParams, seed: u64) -> Result<KMeansFit> {
    if params.k == 0 || params.restarts == 0 || params.max_iter == 0 {
        return Err(Error::config("k-means needs k, restarts and max_iter > 0"));
    }
    if x.nrows() < params.k {
        return Err(Error::domain(format!(
            "k-means with k={} on {} points",
            params.k,
            x.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("k-means input is not finite"));
    }
    let fits: Vec<KMeansFit> = (0..params.restarts)
        .into_par_iter()
        .map(|r| lloyd(x, params.k, params.max_iter, derive_seed(seed, r as u64)))
        .collect();
    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.inertia < fits[best].inertia {
            best = i;
        }
    }
    Ok(fits.into_iter().nth(best).expect("at least one restart"))
}
