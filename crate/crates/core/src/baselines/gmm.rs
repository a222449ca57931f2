//! Full-covariance Gaussian mixtures fitted by EM, with the number of
//! components chosen by BIC.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kmeans::plus_plus_init;
use crate::detector::derive_seed;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const REG_COVAR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmParams {
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Convergence tolerance on the per-sample log-likelihood.
    pub tol: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        GmmParams {
            k_max: 10,
            restarts: 20,
            max_iter: 100,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    log_det: f64,
}

impl Component {
    fn log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = x.len();
        let mut maha = 0.0;
        for i in 0..d {
            let mut v = x[i] - self.mean[i];
            for j in 0..i {
                v -= self.chol[i * d + j] * scratch[j];
            }
            v /= self.chol[i * d + i];
            scratch[i] = v;
            maha += v * v;
        }
        -0.5 * (d as f64 * LN_2PI + self.log_det + maha)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    /// Total log-likelihood before each M-step.
    pub history: Vec<f64>,
    pub labels: Vec<usize>,
    /// Whether any covariance needed ridge regularisation.
    pub regularized: bool,
}

/// Free parameters of a `k`-component full-covariance mixture in `d` dims.
pub fn num_parameters(k: usize, d: usize) -> usize {
    k * d + k * d * (d + 1) / 2 + k - 1
}

pub fn bic(log_likelihood: f64, k: usize, d: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + num_parameters(k, d) as f64 * (n as f64).ln()
}

fn factor(cov: &DMatrix<f64>, regularized: &mut bool) -> (Vec<f64>, f64) {
    let d = cov.nrows();
    let mut ridge = 0.0;
    loop {
        let m = if ridge > 0.0 {
            cov + DMatrix::identity(d, d) * ridge
        } else {
            cov.clone()
        };
        if let Some(ch) = m.clone().cholesky() {
            let l = ch.l();
            let diag_ok = (0..d).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite());
            if diag_ok {
                let log_det = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
                let mut flat = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..=i {
                        flat[i * d + j] = l[(i, j)];
                    }
                }
                return (flat, log_det);
            }
        }
        *regularized = true;
        ridge = if ridge == 0.0 { REG_COVAR } else { ridge * 10.0 };
    }
}

fn m_step(x: &Array2<f64>, resp: &Array2<f64>, regularized: &mut bool) -> Vec<(Component, DMatrix<f64>)> {
    let (n, d) = x.dim();
    let k = resp.ncols();
    (0..k)
        .map(|c| {
            let nk: f64 = resp.column(c).sum() + 10.0 * f64::EPSILON;
            let mut mean = vec![0.0; d];
            for i in 0..n {
                let r = resp[[i, c]];
                for j in 0..d {
                    mean[j] += r * x[[i, j]];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for i in 0..n {
                let r = resp[[i, c]];
                if r == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let da = x[[i, a]] - mean[a];
                    for b in 0..=a {
                        cov[(a, b)] += r * da * (x[[i, b]] - mean[b]);
                    }
                }
            }
            for a in 0..d {
                for b in 0..=a {
                    let v = cov[(a, b)] / nk;
                    cov[(a, b)] = v;
                    cov[(b, a)] = v;
                }
            }
            let (chol, log_det) = factor(&cov, regularized);
            (
                Component {
                    weight: nk / n as f64,
                    mean,
                    chol,
                    log_det,
                },
                cov,
            )
        })
        .collect()
}

/// Fills `resp` with posterior responsibilities; returns the total
/// log-likelihood.
fn e_step(x: &Array2<f64>, comps: &[Component], resp: &mut Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    let mut scratch = vec![0.0; d];
    let mut row = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..d {
            row[j] = x[[i, j]];
        }
        let mut max = f64::NEG_INFINITY;
        for (c, comp) in comps.iter().enumerate() {
            let v = comp.weight.ln() + comp.log_density(&row, &mut scratch);
            resp[[i, c]] = v;
            max = max.max(v);
        }
        let mut sum = 0.0;
        for c in 0..comps.len() {
            sum += (resp[[i, c]] - max).exp();
        }
        let lse = max + sum.ln();
        for c in 0..comps.len() {
            resp[[i, c]] = (resp[[i, c]] - lse).exp();
        }
        total += lse;
    }
    total
}

fn hard_labels(resp: &Array2<f64>) -> Vec<usize> {
    resp.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn em(x: &Array2<f64>, k: usize, params: &GmmParams, seed: u64) -> GmmFit {
    let (n, d) = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = plus_plus_init(x, k, &mut rng);
    let mut resp = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let dist: f64 = (0..d).map(|j| (x[[i, j]] - centers[[c, j]]).powi(2)).sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        resp[[i, best.1]] = 1.0;
    }
    let mut regularized = false;
    let mut fitted = m_step(x, &resp, &mut regularized);
    let mut history = Vec::new();
    let mut ll = f64::NEG_INFINITY;
    for _ in 0..params.max_iter {
        let comps: Vec<Component> = fitted.iter().map(|(c, _)| c.clone()).collect();
        let next = e_step(x, &comps, &mut resp);
        history.push(next);
        let converged = (next - ll).abs() < params.tol * n as f64;
        ll = next;
        if converged {
            break;
        }
        fitted = m_step(x, &resp, &mut regularized);
    }
    // Responsibilities and likelihood refer to the final parameters.
    let comps: Vec<Component> = fitted.iter().map(|(c, _)| c.clone()).collect();
    let ll = e_step(x, &comps, &mut resp);
    GmmFit {
        k,
        weights: comps.iter().map(|c| c.weight).collect(),
        means: comps.iter().map(|c| c.mean.clone()).collect(),
        covariances: fitted.into_iter().map(|(_, cov)| cov).collect(),
        log_likelihood: ll,
        history,
        labels: hard_labels(&resp),
        regularized,
    }
}

fn check_input(x: &Array2<f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::domain("mixture fit on empty data"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("mixture input is not finite"));
    }
    Ok(())
}

/// Best-likelihood fit over seeded restarts; ties keep the earliest.
pub fn fit_gmm(x: &Array2<f64>, k: usize, params: &GmmParams, seed: u64) -> Result<GmmFit> {
    check_input(x)?;
    if k == 0 || k > x.nrows() {
        return Err(Error::domain(format!(
            "{} components for {} points",
            k,
            x.nrows()
        )));
    }
    let fits: Vec<GmmFit> = (0..params.restarts.max(1))
        .into_par_iter()
        .map(|r| em(x, k, params, derive_seed(seed, r as u64)))
        .collect();
    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.log_likelihood > fits[best].log_likelihood {
            best = i;
        }
    }
    let fit = fits.into_iter().nth(best).expect("at least one restart");
    if fit.regularized {
        log::warn!("singular covariance in a {}-component fit; added ridge", k);
    }
    Ok(fit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BicSelection {
    pub k: usize,
    /// BIC for K = 1..=k_max.
    pub bic: Vec<f64>,
    /// Hard assignments, renumbered so that cluster ids follow the order of
    /// first appearance.
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

/// Fits K = 1..=k_max and keeps the K with the smallest BIC (ties: smallest K).
pub fn gmm_bic_cluster(x: &Array2<f64>, params: &GmmParams, seed: u64) -> Result<BicSelection> {
    check_input(x)?;
    let n = x.nrows();
    if params.k_max == 0 || n <= params.k_max {
        return Err(Error::domain(format!(
            "BIC sweep up to K={} needs more than {} points",
            params.k_max, n
        )));
    }
    let d = x.ncols();
    let mut best: Option<(f64, GmmFit)> = None;
    let mut bics = Vec::with_capacity(params.k_max);
    for k in 1..=params.k_max {
        let fit = fit_gmm(x, k, params, derive_seed(seed, 1000 + k as u64))?;
        let b = bic(fit.log_likelihood, k, d, n);
        bics.push(b);
        if best.as_ref().is_none_or(|(bb, _)| b < *bb) {
            best = Some((b, fit));
        }
    }
    let (_, fit) = best.expect("k_max >= 1");
    let mut remap = vec![usize::MAX; fit.k];
    let mut next = 0;
    let labels = fit
        .labels
        .iter()
        .map(|&l| {
            if remap[l] == usize::MAX {
                remap[l] = next;
                next += 1;
            }
            remap[l]
        })
        .collect();
    Ok(BicSelection {
        k: fit.k,
        bic: bics,
        labels,
        num_clusters: next,
    })
}
