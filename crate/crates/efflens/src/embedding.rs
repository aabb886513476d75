//! Exact t-SNE to 2D.
//!
//! Standard exact formulation, no Barnes-Hut: per-point Gaussian bandwidths
//! calibrated by binary search so each conditional distribution's Shannon
//! entropy hits `ln(perplexity)`, symmetrized affinities, Student-t (one
//! degree of freedom) kernel in the plane, gradient descent with early
//! exaggeration and two-phase momentum. All randomness comes from a seeded
//! [`SplitMix64`], so embeddings are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::parallel::par_map;
use crate::rng::SplitMix64;

const P_FLOOR: f64 = 1e-12;
const Q_FLOOR: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-5;
const BANDWIDTH_MAX_ITERS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("perplexity {perplexity} outside (1, {max:.2}) for n = {n}")]
    BadPerplexity { perplexity: f64, n: usize, max: f64 },
    #[error("bandwidth search failed for row {row} (entropy gap {gap:.2e})")]
    BandwidthNotFound { row: usize, gap: f64 },
    #[error("non-finite coordinate at iteration {iteration}")]
    NumericalDivergence { iteration: usize },
    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iterations: usize,
    pub exaggeration_factor: f64,
    pub exaggeration_iters: usize,
    pub step_size: f64,
    pub momentum_early: f64,
    pub momentum_late: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
    /// Subtract the mean input vector before computing distances. Pure
    /// translation, so it cannot change any distance; recorded in output
    /// metadata.
    pub mean_center: bool,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iterations: 1000,
            exaggeration_factor: 12.0,
            exaggeration_iters: 250,
            step_size: 200.0,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch_iter: 250,
            seed: 42,
            mean_center: true,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<(), EmbeddingError> {
        let max = (n as f64 - 1.0) / 3.0;
        if !(self.perplexity > 1.0 && self.perplexity < max) {
            return Err(EmbeddingError::BadPerplexity {
                perplexity: self.perplexity,
                n,
                max,
            });
        }
        if self.n_iterations < self.exaggeration_iters {
            return Err(EmbeddingError::BadPerplexity {
                perplexity: self.perplexity,
                n,
                max,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    /// KL divergence per iteration (against the exaggerated affinities while
    /// exaggeration is active).
    pub kl_trace: Vec<f64>,
}

/// Symmetric squared-distance matrix via the expanded form
/// `|a|^2 + |b|^2 - 2 a.b`, negative rounding artifacts clamped to zero.
pub fn pairwise_sq_distances(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let sq_norms: Vec<f64> = vectors.iter().map(|v| dot(v, v)).collect();
    par_map(n, |i| {
        (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    (sq_norms[i] + sq_norms[j] - 2.0 * dot(&vectors[i], &vectors[j])).max(0.0)
                }
            })
            .collect()
    })
}

/// Conditional and joint affinities after per-row bandwidth calibration.
#[derive(Debug, Clone)]
pub struct Affinities {
    /// Row-stochastic conditional distributions (diagonal zero).
    pub conditional: Vec<Vec<f64>>,
    /// Symmetrized `(P + P^T) / 2n`, floored at 1e-12.
    pub joint: Vec<Vec<f64>>,
    pub betas: Vec<f64>,
}

/// Shannon entropy (nats) and normalized row for a given precision
/// `beta = 1 / (2 sigma^2)`.
fn row_entropy(dists: &[f64], row: usize, beta: f64) -> (f64, Vec<f64>) {
    let n = dists.len();
    let mut p: Vec<f64> = (0..n)
        .map(|j| {
            if j == row {
                0.0
            } else {
                (-beta * dists[j]).exp()
            }
        })
        .collect();
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        return (0.0, p);
    }
    // H = ln(sum) + beta * E[d]
    let weighted: f64 = (0..n).map(|j| dists[j] * p[j]).sum();
    let h = sum.ln() + beta * weighted / sum;
    for v in &mut p {
        *v /= sum;
    }
    (h, p)
}

/// Binary-search each row's Gaussian bandwidth so the conditional entropy
/// equals `ln(perplexity)` within 1e-5 (50 iterations max), then symmetrize.
pub fn calibrate_affinities(
    sq_dists: &[Vec<f64>],
    perplexity: f64,
) -> Result<Affinities, EmbeddingError> {
    let n = sq_dists.len();
    let target = perplexity.ln();
    let rows = par_map(n, |i| -> Result<(Vec<f64>, f64), EmbeddingError> {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let mut result = row_entropy(&sq_dists[i], i, beta);
        for _ in 0..BANDWIDTH_MAX_ITERS {
            let gap = result.0 - target;
            if gap.abs() < ENTROPY_TOL {
                return Ok((result.1, beta));
            }
            if gap > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + beta_max) / 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() {
                    beta / 2.0
                } else {
                    (beta + beta_min) / 2.0
                };
            }
            result = row_entropy(&sq_dists[i], i, beta);
        }
        let gap = result.0 - target;
        if gap.abs() < ENTROPY_TOL {
            Ok((result.1, beta))
        } else {
            Err(EmbeddingError::BandwidthNotFound { row: i, gap })
        }
    });
    let mut conditional = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for row in rows {
        let (p, beta) = row?;
        conditional.push(p);
        betas.push(beta);
    }
    let joint: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| ((conditional[i][j] + conditional[j][i]) / (2.0 * n as f64)).max(P_FLOOR))
                .collect()
        })
        .collect();
    Ok(Affinities {
        conditional,
        joint,
        betas,
    })
}

/// Student-t (df = 1) kernel weights and their total mass for the current
/// layout.
fn low_dim_kernel(points: &[[f64; 2]]) -> (Vec<Vec<f64>>, f64) {
    let n = points.len();
    let weights: Vec<Vec<f64>> = par_map(n, |i| {
        (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    let dx = points[i][0] - points[j][0];
                    let dy = points[i][1] - points[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
            .collect()
    });
    let mass: f64 = weights.iter().map(|row| row.iter().sum::<f64>()).sum();
    (weights, mass)
}

/// `KL(P || Q)` for the current layout.
fn kl_divergence(p: &[Vec<f64>], weights: &[Vec<f64>], mass: f64) -> f64 {
    let n = p.len();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (weights[i][j] / mass).max(Q_FLOOR);
                kl += p[i][j] * (p[i][j] / q).ln();
            }
        }
    }
    kl
}

/// Analytic KL gradient: `grad_i = 4 sum_j (p_ij - q_ij) w_ij (y_i - y_j)`
/// where `w` is the unnormalized Student-t weight.
fn kl_gradient(
    p: &[Vec<f64>],
    weights: &[Vec<f64>],
    mass: f64,
    points: &[[f64; 2]],
) -> Vec<[f64; 2]> {
    let n = points.len();
    par_map(n, |i| {
        let mut g = [0.0, 0.0];
        for j in 0..n {
            if i != j {
                let q = (weights[i][j] / mass).max(Q_FLOOR);
                let coeff = 4.0 * (p[i][j] - q) * weights[i][j];
                g[0] += coeff * (points[i][0] - points[j][0]);
                g[1] += coeff * (points[i][1] - points[j][1]);
            }
        }
        g
    })
}

/// Run exact t-SNE on labelled high-dimensional vectors.
pub fn tsne(
    vectors: &[Vec<f64>],
    labels: &[u8],
    cfg: &TsneConfig,
) -> Result<Embedding2D, EmbeddingError> {
    let n = vectors.len();
    assert_eq!(labels.len(), n, "label count mismatch");
    if n < 4 {
        return Err(EmbeddingError::TooFewPoints { needed: 4, found: n });
    }
    cfg.validate(n)?;

    let centered: Vec<Vec<f64>>;
    let inputs: &[Vec<f64>] = if cfg.mean_center {
        let dim = vectors[0].len();
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        centered = vectors
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(&x, &m)| x - m).collect())
            .collect();
        &centered
    } else {
        vectors
    };

    let sq_dists = pairwise_sq_distances(inputs);
    let affinities = calibrate_affinities(&sq_dists, cfg.perplexity)?;

    let mut rng = SplitMix64::new(cfg.seed);
    let mut points: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-4 * rng.next_gaussian(), 1e-4 * rng.next_gaussian()])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.n_iterations);

    // Exaggerated affinities for the early phase.
    let p_exaggerated: Vec<Vec<f64>> = affinities
        .joint
        .iter()
        .map(|row| row.iter().map(|&v| v * cfg.exaggeration_factor).collect())
        .collect();

    for iter in 0..cfg.n_iterations {
        let p = if iter < cfg.exaggeration_iters {
            &p_exaggerated
        } else {
            &affinities.joint
        };
        let momentum = if iter < cfg.momentum_switch_iter {
            cfg.momentum_early
        } else {
            cfg.momentum_late
        };
        let (weights, mass) = low_dim_kernel(&points);
        kl_trace.push(kl_divergence(p, &weights, mass));
        let grad = kl_gradient(p, &weights, mass, &points);
        for i in 0..n {
            for d in 0..2 {
                velocity[i][d] = momentum * velocity[i][d] - cfg.step_size * grad[i][d];
                points[i][d] += velocity[i][d];
                if !points[i][d].is_finite() {
                    return Err(EmbeddingError::NumericalDivergence { iteration: iter });
                }
            }
        }
    }

    Ok(Embedding2D {
        points,
        labels: labels.to_vec(),
        kl_trace,
    })
}
