use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, PredictionMatrix};
use crate::sim::stream_rng;

/// `clusters[i]` is the cluster of `items[i]`. Cluster ids are numbered in
/// order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub items: Vec<usize>,
    pub clusters: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, item: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| self.clusters[p])
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (&i, &c) in self.items.iter().zip(&self.clusters) {
            out[c].push(i);
        }
        out
    }
}

fn canonical(raw: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    raw.iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding then Lloyd iterations; best inertia over `restarts`.
/// Returns canonically relabeled assignments.
pub fn kmeans(rows: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>, AnalysisError> {
    let n = rows.len();
    if k == 0 || k > n {
        return Err(AnalysisError::Invalid(format!("k = {k} with {n} items")));
    }
    let mut rng = stream_rng(seed, "kmeans");
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![rows[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> =
                rows.iter().map(|r| centers.iter().map(|c| sq(r, c)).fold(f64::INFINITY, f64::min)).collect();
            let total: f64 = d.iter().sum();
            let pick = if total <= 0.0 {
                rng.random_range(0..n)
            } else {
                let mut u = rng.random::<f64>() * total;
                d.iter()
                    .position(|&w| {
                        u -= w;
                        u < 0.0
                    })
                    .unwrap_or(n - 1)
            };
            centers.push(rows[pick].clone());
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..300 {
            let next: Vec<usize> = rows
                .iter()
                .map(|r| (0..k).min_by(|&a, &b| sq(r, &centers[a]).total_cmp(&sq(r, &centers[b]))).expect("k > 0"))
                .collect();
            if next == assign {
                break;
            }
            assign = next;
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> =
                    rows.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(r, _)| r).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = rows.iter().zip(&assign).map(|(r, &a)| sq(r, &centers[a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b - 1e-12) {
            best = Some((inertia, assign));
        }
    }
    Ok(canonical(&best.expect("at least one restart").1))
}

/// Spectral clustering of a prediction matrix: symmetrized affinity with the
/// diagonal dropped and scaled by its largest entry, symmetric normalized
/// Laplacian, the `k` lowest eigenvectors row-normalized, then k-means with
/// 10 seeded restarts.
pub fn spectral_cluster(p: &PredictionMatrix, k: usize, seed: u64) -> Result<ClusterAssignment, AnalysisError> {
    let n = p.n();
    if k < 2 {
        return Err(AnalysisError::Invalid("spectral clustering needs k ≥ 2".into()));
    }
    if k > n {
        return Err(AnalysisError::Invalid(format!("k = {k} exceeds {n} items")));
    }
    let mut a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (p.values[i][j] + p.values[j][i]) / 2.0 });
    let max = a.max();
    if max > 0.0 {
        a /= max;
    }
    let inv_sqrt: Vec<f64> = a
        .row_iter()
        .map(|r| {
            let d = r.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r
            }
        })
        .collect();
    let clusters = kmeans(&rows, k, 10, seed)?;
    Ok(ClusterAssignment { items: p.labels.clone(), clusters, k })
}

/// Fraction of items whose cluster's majority true class matches their own.
pub fn purity(assign: &ClusterAssignment, truth: impl Fn(usize) -> usize) -> f64 {
    if assign.items.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&i, &c) in assign.items.iter().zip(&assign.clusters) {
        *counts.entry((c, truth(i))).or_default() += 1;
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(c, _), &v) in &counts {
        let b = best.entry(c).or_default();
        *b = (*b).max(v);
    }
    best.values().sum::<usize>() as f64 / assign.items.len() as f64
}
