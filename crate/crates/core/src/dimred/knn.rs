use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Exact Euclidean k-nearest-neighbour lists, self excluded. Row `i` is sorted
/// by distance, ties broken by the lower index.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbor_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

pub fn knn_graph(x: &Array2<f64>, k: usize) -> Result<KnnGraph> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::domain(format!(
            "need 0 < k < n for a k-NN graph (k={}, n={})",
            k, n
        )));
    }
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let per_row: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &rows[i];
            let mut cand: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, xj)| {
                    let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, j)
                })
                .collect();
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            };
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
            cand.sort_by(by_dist);
            (
                cand.iter().map(|c| c.1).collect(),
                cand.iter().map(|c| c.0.sqrt()).collect(),
            )
        })
        .collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (idx, dist) in per_row {
        indices.extend(idx);
        distances.extend(dist);
    }
    Ok(KnnGraph {
        k,
        indices,
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    /// Full sort of every pairwise distance.
    fn brute_force(x: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
        let n = x.nrows();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                        (d, j)
                    })
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.into_iter().take(k).map(|p| p.1).collect()
            })
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(0.0, 10.0).unwrap();
        for &(n, d, k) in &[(50usize, 3usize, 5usize), (300, 8, 15), (1200, 4, 15)] {
            let x = Array2::from_shape_fn((n, d), |_| u.sample(&mut rng));
            let g = knn_graph(&x, k).unwrap();
            let oracle = brute_force(&x, k);
            for i in 0..n {
                assert_eq!(g.neighbors(i), oracle[i].as_slice());
                assert_eq!(g.neighbors(i).len(), k);
                assert!(g.neighbor_distances(i).windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn k_must_be_below_n() {
        let x = Array2::zeros((5, 2));
        assert!(knn_graph(&x, 5).is_err());
        assert!(knn_graph(&x, 0).is_err());
        assert!(knn_graph(&x, 4).is_ok());
    }
}
