//! Density-based clustering of the reduced features.
//!
//! A point is *core* when at least `min_pts` points (itself included) lie
//! within `eps`. Clusters are the connected components of the core points
//! under the `eps` relation, extended by the non-core points that some core
//! reaches directly. A border point reached by cores of several clusters
//! joins the cluster of the claiming core with the lowest id. Points reached
//! by no core are outliers.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClassView;
use crate::dimred::{reduce, ReductionConfig};
use crate::error::{Error, Result};

/// Above this many points the neighbourhood queries go through a uniform
/// grid. Results are identical to the naive scan.
const GRID_THRESHOLD: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps: 0.8,
            min_pts: 20,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.min_pts == 0 {
            return Err(Error::domain(format!(
                "DBSCAN needs eps > 0 and min_pts >= 1 (got {}, {})",
                self.eps, self.min_pts
            )));
        }
        Ok(())
    }
}

/// Cluster assignment for a set of identified points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    /// Point ids in input order.
    pub ids: Vec<u64>,
    /// Cluster index per point, `None` for outliers.
    pub assignment: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl ClusterPartition {
    pub fn empty() -> Self {
        ClusterPartition {
            ids: Vec::new(),
            assignment: Vec::new(),
            num_clusters: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Input positions of the members of cluster `k`.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == Some(k))
            .collect()
    }

    pub fn outlier_positions(&self) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i].is_none())
            .collect()
    }

    pub fn outlier_ids(&self) -> Vec<u64> {
        self.outlier_positions().into_iter().map(|i| self.ids[i]).collect()
    }

    /// Fraction of points left unclustered.
    pub fn outlier_ratio(&self) -> f64 {
        if self.ids.is_empty() {
            return 0.0;
        }
        self.outlier_positions().len() as f64 / self.ids.len() as f64
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for k in self.assignment.iter().flatten() {
            sizes[*k] += 1;
        }
        sizes
    }

    /// Partition as a set of id-sets, independent of cluster numbering.
    pub fn canonical(&self) -> (BTreeSet<BTreeSet<u64>>, BTreeSet<u64>) {
        let mut clusters = vec![BTreeSet::new(); self.num_clusters];
        let mut outliers = BTreeSet::new();
        for (id, a) in self.ids.iter().zip(&self.assignment) {
            match a {
                Some(k) => {
                    clusters[*k].insert(*id);
                }
                None => {
                    outliers.insert(*id);
                }
            }
        }
        (clusters.into_iter().collect(), outliers)
    }
}

/// DBSCAN over the rows of `y`; ids are row positions.
pub fn dbscan(y: &Array2<f64>, params: &DbscanParams) -> Result<ClusterPartition> {
    let ids: Vec<u64> = (0..y.nrows() as u64).collect();
    dbscan_with_ids(y, &ids, params)
}

/// DBSCAN where tie-breaks and cluster numbering follow the supplied ids, so
/// the result does not depend on row order.
pub fn dbscan_with_ids(
    y: &Array2<f64>,
    ids: &[u64],
    params: &DbscanParams,
) -> Result<ClusterPartition> {
    params.validate()?;
    let n = y.nrows();
    if ids.len() != n {
        return Err(Error::domain("one id per row is required"));
    }
    if n == 0 {
        return Ok(ClusterPartition::empty());
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("DBSCAN input contains non-finite values"));
    }
    let neighborhoods = if n > GRID_THRESHOLD && y.ncols() <= 4 {
        grid_neighborhoods(y, params.eps)
    } else {
        naive_neighborhoods(y, params.eps)
    };
    let core: Vec<bool> = neighborhoods
        .iter()
        .map(|nb| nb.len() >= params.min_pts)
        .collect();

    let mut uf = UnionFind::new(n);
    for i in 0..n {
        if core[i] {
            for &j in &neighborhoods[i] {
                if core[j] {
                    uf.union(i, j);
                }
            }
        }
    }

    // number components by the smallest core id they contain
    let mut root_min_id: HashMap<usize, u64> = HashMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let r = uf.find(i);
        let e = root_min_id.entry(r).or_insert(ids[i]);
        *e = (*e).min(ids[i]);
    }
    let mut roots: Vec<(u64, usize)> = root_min_id.iter().map(|(&r, &m)| (m, r)).collect();
    roots.sort_unstable();
    let cluster_of_root: HashMap<usize, usize> =
        roots.iter().enumerate().map(|(k, &(_, r))| (r, k)).collect();

    let mut assignment = vec![None; n];
    for i in 0..n {
        if core[i] {
            assignment[i] = Some(cluster_of_root[&uf.find(i)]);
        } else if let Some(&c) = neighborhoods[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by_key(|&&j| ids[j])
        {
            assignment[i] = Some(cluster_of_root[&uf.find(c)]);
        }
    }
    Ok(ClusterPartition {
        ids: ids.to_vec(),
        assignment,
        num_clusters: roots.len(),
    })
}

fn within(y: &Array2<f64>, i: usize, j: usize, eps_sq: f64) -> bool {
    let d: f64 = y
        .row(i)
        .iter()
        .zip(y.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    d <= eps_sq
}

fn naive_neighborhoods(y: &Array2<f64>, eps: f64) -> Vec<Vec<usize>> {
    let eps_sq = eps * eps;
    let n = y.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| within(y, i, j, eps_sq)).collect())
        .collect()
}

fn grid_neighborhoods(y: &Array2<f64>, eps: f64) -> Vec<Vec<usize>> {
    let eps_sq = eps * eps;
    let dim = y.ncols();
    let cell_of = |i: usize| -> Vec<i64> {
        y.row(i).iter().map(|v| (v / eps).floor() as i64).collect()
    };
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for i in 0..y.nrows() {
        grid.entry(cell_of(i)).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dim as u32))
        .map(|mut code| {
            (0..dim)
                .map(|_| {
                    let o = (code % 3) as i64 - 1;
                    code /= 3;
                    o
                })
                .collect()
        })
        .collect();
    (0..y.nrows())
        .into_par_iter()
        .map(|i| {
            let cell = cell_of(i);
            let mut out = Vec::new();
            for off in &offsets {
                let key: Vec<i64> = cell.iter().zip(off).map(|(c, o)| c + o).collect();
                if let Some(bucket) = grid.get(&key) {
                    out.extend(bucket.iter().copied().filter(|&j| within(y, i, j, eps_sq)));
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Clustering of one class: reduction followed by DBSCAN, with ids taken
/// from the samples.
#[derive(Clone, Debug)]
pub struct ClassClustering {
    pub partition: ClusterPartition,
    /// Reduced coordinates, row-aligned with `partition.ids`.
    pub embedding: Array2<f64>,
}

pub fn cluster_class(
    view: &ClassView<'_>,
    reduction: &ReductionConfig,
    params: &DbscanParams,
) -> Result<ClassClustering> {
    if view.is_empty() {
        return Err(Error::domain(format!("class {} has no samples", view.class)));
    }
    params.validate()?;
    let x = view.matrix();
    let embedding = reduce(&x, reduction)?;
    let partition = dbscan_with_ids(&embedding, &view.ids(), params)?;
    Ok(ClassClustering {
        partition,
        embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    #[test]
    fn one_dimensional_example() {
        let y = array![[0.0], [0.5], [1.0], [10.0]];
        let p = dbscan(&y, &DbscanParams { eps: 1.0, min_pts: 3 }).unwrap();
        assert_eq!(p.num_clusters, 1);
        assert_eq!(p.assignment, vec![Some(0), Some(0), Some(0), None]);
        assert_eq!(p.outlier_ids(), vec![3]);
        assert!((p.outlier_ratio() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn too_few_points_are_outliers() {
        let y = array![[0.0, 0.0], [0.1, 0.0]];
        let p = dbscan(&y, &DbscanParams { eps: 1.0, min_pts: 3 }).unwrap();
        assert_eq!(p.num_clusters, 0);
        assert_eq!(p.outlier_ratio(), 1.0);
    }

    #[test]
    fn huge_eps_gives_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Uniform::new(-50.0, 50.0).unwrap();
        let y = Array2::from_shape_fn((100, 2), |_| u.sample(&mut rng));
        let p = dbscan(&y, &DbscanParams { eps: 1e6, min_pts: 20 }).unwrap();
        assert_eq!(p.num_clusters, 1);
        assert!(p.assignment.iter().all(|a| *a == Some(0)));
    }

    #[test]
    fn empty_input() {
        let y = Array2::<f64>::zeros((0, 2));
        let p = dbscan(&y, &DbscanParams::default()).unwrap();
        assert_eq!(p.num_clusters, 0);
        assert!(p.is_empty());
    }

    #[test]
    fn invalid_params() {
        let y = array![[0.0]];
        assert!(dbscan(&y, &DbscanParams { eps: 0.0, min_pts: 3 }).is_err());
        assert!(dbscan(&y, &DbscanParams { eps: 1.0, min_pts: 0 }).is_err());
        let bad = array![[f64::NAN]];
        assert!(dbscan(&bad, &DbscanParams::default()).is_err());
    }

    #[test]
    fn contested_border_goes_to_lowest_core() {
        // two dense groups with a single point exactly eps away from an edge core
        // of each
        let mut pts = vec![];
        for k in 0..4 {
            pts.push([k as f64 * 0.25, 0.0]);
        }
        for k in 0..4 {
            pts.push([2.25 + k as f64 * 0.25, 0.0]);
        }
        pts.push([1.5, 0.0]);
        let y = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]);
        let p = dbscan(&y, &DbscanParams { eps: 0.75, min_pts: 4 }).unwrap();
        assert_eq!(p.num_clusters, 2);
        assert_eq!(p.assignment[8], p.assignment[0]);

        // same geometry, but the right-hand group now has the smaller ids
        let ids: Vec<u64> = vec![10, 11, 12, 13, 0, 1, 2, 3, 20];
        let p = dbscan_with_ids(&y, &ids, &DbscanParams { eps: 0.75, min_pts: 4 }).unwrap();
        assert_eq!(p.assignment[8], p.assignment[4]);
        assert_eq!(p.assignment[4], Some(0));
    }

    #[test]
    fn grid_index_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Uniform::new(0.0, 30.0).unwrap();
        let y = Array2::from_shape_fn((3000, 2), |_| u.sample(&mut rng));
        let mut a = naive_neighborhoods(&y, 0.8);
        let mut b = grid_neighborhoods(&y, 0.8);
        a.iter_mut().for_each(|v| v.sort_unstable());
        b.iter_mut().for_each(|v| v.sort_unstable());
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn permutation_only_renumbers(
            pts in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..120),
            eps in 0.3f64..2.0,
            min_pts in 1usize..8,
            seed in any::<u64>(),
        ) {
            let n = pts.len();
            let y = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
            let params = DbscanParams { eps, min_pts };
            let base = dbscan(&y, &params).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permuted = Array2::from_shape_fn((n, 2), |(i, j)| y[[order[i], j]]);
            let ids: Vec<u64> = order.iter().map(|&i| i as u64).collect();
            let other = dbscan_with_ids(&permuted, &ids, &params).unwrap();
            prop_assert_eq!(base.canonical(), other.canonical());
        }

        #[test]
        fn outliers_are_unreachable(
            pts in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..120),
            eps in 0.3f64..2.0,
            min_pts in 1usize..8,
        ) {
            let n = pts.len();
            let y = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
            let params = DbscanParams { eps, min_pts };
            let p = dbscan(&y, &params).unwrap();
            let nb = naive_neighborhoods(&y, eps);
            for o in p.outlier_positions() {
                prop_assert!(nb[o].len() < min_pts);
                prop_assert!(nb[o].iter().all(|&j| nb[j].len() < min_pts));
            }
        }
    }
}
