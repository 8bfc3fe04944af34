//! Gaussian mixture model fitted by expectation-maximization with k-means++
//! initialization, diagonal covariance regularization, and BIC-based
//! component selection.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// Component means, each of length `dim`.
    pub means: Vec<Vec<f64>>,
    /// Row-major symmetric positive definite covariances, each dim x dim.
    pub covariances: Vec<Vec<f64>>,
    /// Per-iteration log-likelihood trace from the fit.
    pub log_likelihood_trace: Vec<f64>,
}

const COV_REG: f64 = 1e-6;

struct CompCache {
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64, // -0.5 * (D ln(2 pi) + ln det)
    mean: DVector<f64>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn caches(&self) -> Result<Vec<CompCache>> {
        self.covariances
            .iter()
            .zip(&self.means)
            .map(|(cov, mean)| {
                let m = DMatrix::from_row_slice(self.dim, self.dim, cov);
                let chol = Cholesky::new(m)
                    .ok_or_else(|| Error::runtime("gmm: covariance not positive definite"))?;
                let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
                Ok(CompCache {
                    chol,
                    log_norm: -0.5 * (self.dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
                    mean: DVector::from_row_slice(mean),
                })
            })
            .collect()
    }

    /// Negative log-likelihood of a point under the mixture, computed with
    /// log-sum-exp over component log densities.
    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        let caches = self.caches()?;
        Ok(-log_likelihood_point(&self.weights, &caches, x))
    }

    /// NLL for many points, reusing the factorizations.
    pub fn nll_batch(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        let caches = self.caches()?;
        Ok(points.iter().map(|x| -log_likelihood_point(&self.weights, &caches, x)).collect())
    }

    /// Bayesian information criterion on the fitted data's log-likelihood.
    pub fn bic(&self, n_points: usize) -> f64 {
        let k = self.n_components() as f64;
        let d = self.dim as f64;
        let params = (k - 1.0) + k * d + k * d * (d + 1.0) / 2.0;
        let ll = *self.log_likelihood_trace.last().unwrap_or(&f64::NEG_INFINITY);
        -2.0 * ll + params * (n_points as f64).ln()
    }
}

fn log_likelihood_point(weights: &[f64], caches: &[CompCache], x: &[f64]) -> f64 {
    let xv = DVector::from_row_slice(x);
    let mut terms = Vec::with_capacity(weights.len());
    for (w, c) in weights.iter().zip(caches) {
        if *w <= 0.0 {
            terms.push(f64::NEG_INFINITY);
            continue;
        }
        let diff = &xv - &c.mean;
        let solved = c.chol.solve(&diff);
        let maha = diff.dot(&solved);
        terms.push(w.ln() + c.log_norm - 0.5 * maha);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.below(points.len())
        } else {
            let mut u = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fit by EM from a k-means++ start. Stops when the log-likelihood gain
/// drops below `tol` or after `max_iter` iterations; covariances get +1e-6 I
/// regularization every iteration.
pub fn fit_gmm(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut RngStream,
    max_iter: usize,
    tol: f64,
) -> Result<GmmModel> {
    let n = points.len();
    if n <= k {
        return Err(Error::validation(format!("gmm: need more than {k} points, got {n}")));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::validation("gmm: inconsistent point dimensions"));
    }
    if points.iter().all(|p| sq_dist(p, &points[0]) < 1e-24) {
        return Err(Error::validation("gmm: all points identical"));
    }

    let means0 = kmeans_pp_init(points, k, rng);
    // Shared initial covariance: data covariance (regularized).
    let global_mean: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let mut init_cov = vec![0.0; dim * dim];
    for p in points {
        for i in 0..dim {
            for j in 0..dim {
                init_cov[i * dim + j] += (p[i] - global_mean[i]) * (p[j] - global_mean[j]) / n as f64;
            }
        }
    }
    for i in 0..dim {
        init_cov[i * dim + i] += COV_REG;
    }

    let mut model = GmmModel {
        dim,
        weights: vec![1.0 / k as f64; k],
        means: means0,
        covariances: vec![init_cov; k],
        log_likelihood_trace: Vec::new(),
    };

    let mut resp = vec![0.0; n * k];
    for _ in 0..max_iter {
        // E step.
        let caches = model.caches()?;
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let xv = DVector::from_row_slice(p);
            let mut terms = Vec::with_capacity(k);
            for (w, c) in model.weights.iter().zip(&caches) {
                let diff = &xv - &c.mean;
                let maha = diff.dot(&c.chol.solve(&diff));
                terms.push(w.max(1e-300).ln() + c.log_norm - 0.5 * maha);
            }
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            ll += lse;
            for (c, t) in terms.iter().enumerate() {
                resp[i * k + c] = (t - lse).exp();
            }
        }
        let converged = model
            .log_likelihood_trace
            .last()
            .map(|prev| (ll - prev).abs() < tol)
            .unwrap_or(false);
        model.log_likelihood_trace.push(ll);
        if converged {
            break;
        }

        // M step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            let nk = nk.max(1e-12);
            model.weights[c] = nk / n as f64;
            let mut mean = vec![0.0; dim];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + c];
                for j in 0..dim {
                    mean[j] += r * p[j];
                }
            }
            for m in &mut mean {
                *m /= nk;
            }
            let mut cov = vec![0.0; dim * dim];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + c];
                for a in 0..dim {
                    for b in 0..dim {
                        cov[a * dim + b] += r * (p[a] - mean[a]) * (p[b] - mean[b]);
                    }
                }
            }
            for v in &mut cov {
                *v /= nk;
            }
            for a in 0..dim {
                cov[a * dim + a] += COV_REG;
            }
            model.means[c] = mean;
            model.covariances[c] = cov;
        }
    }
    Ok(model)
}

/// Fit candidates over 1..=max_k components and keep the lowest BIC.
pub fn fit_gmm_bic(
    points: &[Vec<f64>],
    max_k: usize,
    rng: &mut RngStream,
    max_iter: usize,
    tol: f64,
) -> Result<GmmModel> {
    let mut best: Option<(f64, GmmModel)> = None;
    for k in 1..=max_k {
        if points.len() <= k {
            break;
        }
        let mut sub = rng.substream(k as u64);
        let model = fit_gmm(points, k, &mut sub, max_iter, tol)?;
        let bic = model.bic(points.len());
        if best.as_ref().map(|(b, _)| bic < *b).unwrap_or(true) {
            best = Some((bic, model));
        }
    }
    best.map(|(_, m)| m).ok_or_else(|| Error::validation("gmm: no viable component count"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blob(n: usize, mean: [f64; 2], std: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![mean[0] + rng.normal() * std, mean[1] + rng.normal() * std])
            .collect()
    }

    #[test]
    fn single_component_recovers_sample_moments() {
        let mut rng = RngStream::new(17);
        let points = gaussian_blob(200, [2.0, -1.0], 0.7, &mut rng);
        let model = fit_gmm(&points, 1, &mut rng, 50, 1e-9).unwrap();
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..2).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        for j in 0..2 {
            assert!((model.means[0][j] - mean[j]).abs() < 1e-9);
        }
        let mut cov = vec![0.0; 4];
        for p in &points {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a * 2 + b] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
                }
            }
        }
        cov[0] += COV_REG;
        cov[3] += COV_REG;
        for j in 0..4 {
            assert!((model.covariances[0][j] - cov[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn two_well_separated_clusters_recovered() {
        let mut rng = RngStream::new(23);
        let mut points = gaussian_blob(150, [0.0, 0.0], 0.3, &mut rng);
        points.extend(gaussian_blob(150, [5.0, 5.0], 0.3, &mut rng));
        let model = fit_gmm(&points, 2, &mut rng, 100, 1e-9).unwrap();
        let mut found = [false; 2];
        for m in &model.means {
            if sq_dist(m, &[0.0, 0.0]).sqrt() < 0.1 {
                found[0] = true;
            }
            if sq_dist(m, &[5.0, 5.0]).sqrt() < 0.1 {
                found[1] = true;
            }
        }
        assert!(found[0] && found[1], "means {:?}", model.means);
    }

    #[test]
    fn log_likelihood_nondecreasing() {
        let mut rng = RngStream::new(29);
        let mut points = gaussian_blob(100, [0.0, 0.0], 1.0, &mut rng);
        points.extend(gaussian_blob(80, [3.0, -2.0], 0.5, &mut rng));
        let model = fit_gmm(&points, 3, &mut rng, 60, 1e-12).unwrap();
        let trace = &model.log_likelihood_trace;
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood dropped: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn standard_normal_nll_at_origin() {
        let model = GmmModel {
            dim: 2,
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            covariances: vec![vec![1.0, 0.0, 0.0, 1.0]],
            log_likelihood_trace: vec![],
        };
        let nll = model.nll(&[0.0, 0.0]).unwrap();
        assert!((nll - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_is_more_likely_than_five_sigma() {
        let model = GmmModel {
            dim: 2,
            weights: vec![1.0],
            means: vec![vec![1.0, 2.0]],
            covariances: vec![vec![0.5, 0.0, 0.0, 0.5]],
            log_likelihood_trace: vec![],
        };
        let at_mean = model.nll(&[1.0, 2.0]).unwrap();
        let sigma = 0.5f64.sqrt();
        let far = model.nll(&[1.0 + 5.0 * sigma, 2.0]).unwrap();
        assert!(at_mean < far);
    }

    #[test]
    fn nll_matches_direct_density_sum() {
        let mut rng = RngStream::new(31);
        let mut points = gaussian_blob(60, [0.0, 0.0], 1.0, &mut rng);
        points.extend(gaussian_blob(60, [4.0, 1.0], 0.8, &mut rng));
        points.extend(gaussian_blob(60, [-3.0, 3.0], 0.6, &mut rng));
        let model = fit_gmm(&points, 3, &mut rng, 60, 1e-9).unwrap();
        for _ in 0..10 {
            let x = [rng.range(-5.0, 6.0), rng.range(-2.0, 6.0)];
            let nll = model.nll(&x).unwrap();
            // Direct 2x2 density evaluation.
            let mut density = 0.0;
            for c in 0..3 {
                let m = &model.means[c];
                let cv = &model.covariances[c];
                let det = cv[0] * cv[3] - cv[1] * cv[2];
                let (dx, dy) = (x[0] - m[0], x[1] - m[1]);
                let maha = (cv[3] * dx * dx - (cv[1] + cv[2]) * dx * dy + cv[0] * dy * dy) / det;
                density += model.weights[c] * (-0.5 * maha).exp()
                    / (2.0 * std::f64::consts::PI * det.sqrt());
            }
            assert!((nll - (-density.ln())).abs() < 1e-10, "{nll} vs {}", -density.ln());
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let mut rng = RngStream::new(37);
        let points = vec![vec![1.0, 1.0]; 50];
        assert!(fit_gmm(&points, 2, &mut rng, 10, 1e-6).is_err());
        let few = gaussian_blob(3, [0.0, 0.0], 1.0, &mut rng);
        assert!(fit_gmm(&few, 3, &mut rng, 10, 1e-6).is_err());
    }

    #[test]
    fn bic_prefers_two_components_for_two_clusters() {
        let mut rng = RngStream::new(41);
        let mut points = gaussian_blob(200, [0.0, 0.0], 0.4, &mut rng);
        points.extend(gaussian_blob(200, [8.0, 8.0], 0.4, &mut rng));
        let model = fit_gmm_bic(&points, 5, &mut rng, 60, 1e-9).unwrap();
        assert_eq!(model.n_components(), 2, "BIC chose {}", model.n_components());
    }
}
