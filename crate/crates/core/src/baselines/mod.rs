//! Reference defences: activation clustering (AC) and filter-based cluster
//! inspection (CI).

pub mod ac;
pub mod ci;
pub mod gmm;
pub mod kmeans;

pub use ac::{ac_analyze, size_ratio, AcAnalysis, AcConfig, AcVerdict, ActivationClustering};
pub use ci::{
    ci_analyze, ci_disagreement, kl_score, CiAnalysis, CiConfig, CiVerdict, CleanseInspection,
};
pub use gmm::{bic, fit_gmm, gmm_bic_cluster, BicSelection, GmmFit, GmmParams};
pub use kmeans::{kmeans, KMeansFit, KMeansParams};
