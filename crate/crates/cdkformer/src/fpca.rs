//! Functional PCA on uniformly sampled trajectories: each coordinate is a
//! one-dimensional function, reduced by eigen-decomposition of the sample
//! covariance of the discretized curves.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordBasis {
    pub mean: Vec<f64>,
    /// Retained orthonormal components, each of length T.
    pub components: Vec<Vec<f64>>,
    /// Explained-variance ratios for the retained components, nonincreasing.
    pub explained: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaBasis {
    pub t_len: usize,
    pub x: CoordBasis,
    pub y: CoordBasis,
}

const VARIANCE_TARGET: f64 = 0.90;
const MAX_COMPONENTS_PER_COORD: usize = 4;

fn fit_coordinate(curves: &[Vec<f64>]) -> CoordBasis {
    let n = curves.len();
    let t = curves[0].len();
    let mean: Vec<f64> = (0..t).map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(t, t);
    for c in curves {
        for a in 0..t {
            let da = c[a] - mean[a];
            for b in a..t {
                cov[(a, b)] += da * (c[b] - mean[b]) / n as f64;
            }
        }
    }
    for a in 0..t {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());

    let mut components = Vec::new();
    let mut explained = Vec::new();
    let mut cum = 0.0;
    for &idx in &order {
        if components.len() >= MAX_COMPONENTS_PER_COORD {
            break;
        }
        let ratio = if total > 0.0 { eigenvalues[idx].max(0.0) / total } else { 0.0 };
        components.push(eig.eigenvectors.column(idx).iter().cloned().collect());
        explained.push(ratio);
        cum += ratio;
        if cum >= VARIANCE_TARGET {
            break;
        }
    }
    CoordBasis { mean, components, explained }
}

/// Fit per-coordinate bases on N trajectories of T uniformly sampled 2D
/// points; keeps the smallest component count explaining at least 90% of the
/// variance, capped at 4 per coordinate.
pub fn fpca_fit(trajectories: &[Vec<[f64; 2]>]) -> Result<FpcaBasis> {
    if trajectories.len() < 2 {
        return Err(Error::validation("fpca: need at least 2 trajectories"));
    }
    let t = trajectories[0].len();
    if t < 2 {
        return Err(Error::validation("fpca: trajectories must have at least 2 samples"));
    }
    if trajectories.iter().any(|tr| tr.len() != t) {
        return Err(Error::validation("fpca: trajectories must share one length"));
    }
    let xs: Vec<Vec<f64>> = trajectories.iter().map(|tr| tr.iter().map(|p| p[0]).collect()).collect();
    let ys: Vec<Vec<f64>> = trajectories.iter().map(|tr| tr.iter().map(|p| p[1]).collect()).collect();
    Ok(FpcaBasis { t_len: t, x: fit_coordinate(&xs), y: fit_coordinate(&ys) })
}

/// Projections of one trajectory onto the retained components, x-coordinate
/// scores followed by y-coordinate scores.
pub fn fpca_scores(basis: &FpcaBasis, trajectory: &[[f64; 2]]) -> Result<Vec<f64>> {
    if trajectory.len() != basis.t_len {
        return Err(Error::validation(format!(
            "fpca: trajectory length {} does not match basis length {}",
            trajectory.len(),
            basis.t_len
        )));
    }
    let mut scores = Vec::with_capacity(basis.x.components.len() + basis.y.components.len());
    for (coord, cb) in [(0usize, &basis.x), (1usize, &basis.y)] {
        for comp in &cb.components {
            let s: f64 = trajectory
                .iter()
                .enumerate()
                .map(|(j, p)| (p[coord] - cb.mean[j]) * comp[j])
                .sum();
            scores.push(s);
        }
    }
    Ok(scores)
}

/// Reconstruct a trajectory from its retained scores (for residual checks).
pub fn fpca_reconstruct(basis: &FpcaBasis, scores: &[f64]) -> Vec<[f64; 2]> {
    let nx = basis.x.components.len();
    let mut out: Vec<[f64; 2]> = (0..basis.t_len).map(|j| [basis.x.mean[j], basis.y.mean[j]]).collect();
    for (c, comp) in basis.x.components.iter().enumerate() {
        for j in 0..basis.t_len {
            out[j][0] += scores[c] * comp[j];
        }
    }
    for (c, comp) in basis.y.components.iter().enumerate() {
        for j in 0..basis.t_len {
            out[j][1] += scores[nx + c] * comp[j];
        }
    }
    out
}
