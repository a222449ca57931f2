use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::dimred::check_finite;
use crate::error::{Error, Result};

/// Principal-component projection of a data matrix.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `n x target_dim` coordinates.
    pub embedding: Array2<f64>,
    /// `target_dim x d` unit directions, strongest first.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub mean: Array1<f64>,
    /// Set when fewer than `target_dim` directions carry variance; the
    /// missing components are zero.
    pub rank_deficient: bool,
}

/// Projects centred rows onto the top `target_dim` principal directions.
/// Each direction's largest-magnitude loading is made positive.
pub fn pca_reduce(x: &Array2<f64>, target_dim: usize) -> Result<PcaProjection> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::domain("PCA needs at least two rows"));
    }
    if target_dim == 0 || target_dim > n.min(d) {
        return Err(Error::domain(format!(
            "cannot take {} components from a {}x{} matrix",
            target_dim, n, d
        )));
    }
    check_finite(x)?;
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = top * 1e-12;

    let mut components = Array2::zeros((target_dim, d));
    let mut explained = Vec::with_capacity(target_dim);
    let mut rank_deficient = false;
    for (c, &k) in order.iter().take(target_dim).enumerate() {
        let lambda = eig.eigenvalues[k];
        if !(lambda > floor) || top == 0.0 {
            rank_deficient = true;
            explained.push(0.0);
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..d {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[c, i]] = sign * v[i];
        }
        explained.push(lambda);
    }
    if rank_deficient {
        log::warn!(
            "PCA: data has fewer than {} directions of variance; padding with zeros",
            target_dim
        );
    }
    let embedding = centred.dot(&components.t());
    Ok(PcaProjection {
        embedding,
        components,
        explained_variance: explained,
        mean,
        rank_deficient,
    })
}
