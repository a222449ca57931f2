//! Dimensionality reduction used only to feed the clustering step.

mod curve;
mod knn;
mod pca;
mod umap;

pub use curve::fit_kernel_params;
pub use knn::{knn_graph, KnnGraph};
pub use pca::{pca_reduce, PcaProjection};
pub use umap::{fuzzy_graph, smooth_knn_distances, umap_reduce, FuzzyGraph};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionMethod {
    Umap,
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub method: ReductionMethod,
    pub target_dim: usize,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub epochs: usize,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            method: ReductionMethod::Umap,
            target_dim: 2,
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            epochs: 200,
            negative_sample_rate: 5,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

impl ReductionConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        ReductionConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Reduces `x` (rows are samples) with the configured method.
pub fn reduce(x: &Array2<f64>, cfg: &ReductionConfig) -> Result<Array2<f64>> {
    match cfg.method {
        ReductionMethod::Umap => umap_reduce(x, cfg),
        ReductionMethod::Pca => Ok(pca_reduce(x, cfg.target_dim)?.embedding),
    }
}

pub(crate) fn check_finite(x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("input contains non-finite values"));
    }
    Ok(())
}
