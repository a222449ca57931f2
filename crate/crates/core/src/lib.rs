//! Training-set inspection for backdoored classifiers.

pub mod baselines;
pub mod calibration;
pub mod data;
pub mod dbscan;
pub mod detector;
pub mod dimred;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod pcd;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod triggers;

pub use error::{Error, Result};
