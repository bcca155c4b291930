use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::sim::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Pca,
    Tsne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize, AnalysisError> {
    if x.len() < 3 {
        return Err(AnalysisError::Invalid(format!("projection needs at least 3 rows, got {}", x.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Shape("rows must share a positive width".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Invalid("non-finite embedding value".into()));
    }
    Ok(d)
}

pub fn project_2d(x: &[Vec<f64>], method: Projection, tsne: &TsneConfig) -> Result<Vec<[f64; 2]>, AnalysisError> {
    match method {
        Projection::Pca => pca_2d(x),
        Projection::Tsne => tsne_2d(x, tsne),
    }
}

/// Scores on the top two principal components. Each component is signed so
/// its largest-magnitude loading is positive. A missing second direction
/// yields zeros.
pub fn pca_2d(x: &[Vec<f64>]) -> Result<Vec<[f64; 2]>, AnalysisError> {
    let d = check_rows(x)?;
    let n = x.len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut out = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[k] <= 1e-12 * scale {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[c] = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
        }
    }
    Ok(out)
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|a| x.iter().map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()).collect()).collect()
}

/// Conditional affinities for row `i` at precision `beta`; returns entropy.
fn row_affinity(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-(d[j] - min) * beta).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o /= sum;
        if j != i && *o > 0.0 {
            h -= *o * o.ln();
        }
    }
    h
}

/// Exact (O(n²) per step) t-SNE, seeded.
pub fn tsne_2d(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>, AnalysisError> {
    check_rows(x)?;
    let n = x.len();
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= n as f64 {
        return Err(AnalysisError::Invalid(format!("perplexity {} must lie in (0, {n})", cfg.perplexity)));
    }
    let d = sq_dists(x);
    let target = cfg.perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..100 {
            let h = row_affinity(&d[i], i, beta, &mut p[i]);
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pj = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pj[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = stream_rng(cfg.seed, "tsne");
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![vec![0.0; n]; n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    num[i][j] = 0.0;
                    continue;
                }
                let (a, b) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                num[i][j] = 1.0 / (1.0 + a * a + b * b);
                z += num[i][j];
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i][j] / z).max(1e-12);
                let m = 4.0 * (exag * pj[i][j] - q) * num[i][j];
                grad[0] += m * (y[i][0] - y[j][0]);
                grad[1] += m * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                gains[i][c] = if (grad[c] > 0.0) != (vel[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                vel[i][c] = momentum * vel[i][c] - cfg.learning_rate * gains[i][c] * grad[c];
            }
        }
        for (yi, v) in y.iter_mut().zip(&vel) {
            yi[0] += v[0];
            yi[1] += v[1];
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        for yi in &mut y {
            yi[0] -= mx / n as f64;
            yi[1] -= my / n as f64;
        }
    }
    Ok(y)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
