use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::model::{mask_batch, EncoderModel, SequenceClassifier};
use crate::sim::stream_rng;
use crate::traj::{TokenSequence, Vocabulary};

/// Row `i`: mean predicted distribution over all sequences whose true label is
/// `labels[i]`, restricted to the label columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub labels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl PredictionMatrix {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Builds the matrix from per-item true labels and probability vectors over
    /// `0..n_classes`. Labels that never occur lose both their row and column;
    /// rows are then renormalized.
    pub fn from_probs(truth: &[usize], probs: &[Vec<f64>], n_classes: usize) -> Result<Self, AnalysisError> {
        if truth.len() != probs.len() {
            return Err(AnalysisError::Shape(format!("{} labels but {} probability rows", truth.len(), probs.len())));
        }
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (&t, p) in truth.iter().zip(probs) {
            if t >= n_classes || p.len() != n_classes {
                return Err(AnalysisError::Shape(format!("label {t} or row width {} vs {n_classes} classes", p.len())));
            }
            let e = sums.entry(t).or_insert_with(|| (vec![0.0; n_classes], 0));
            e.0.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let absent = n_classes - sums.len();
        if absent > 0 {
            warn!("{absent} labels have no test items; their rows and columns are dropped");
        }
        let labels: Vec<usize> = sums.keys().copied().collect();
        let values = sums
            .values()
            .map(|(row, count)| {
                let mut r: Vec<f64> = labels.iter().map(|&j| row[j] / *count as f64).collect();
                let s: f64 = r.iter().sum();
                if s > 0.0 {
                    r.iter_mut().for_each(|v| *v /= s);
                }
                r
            })
            .collect();
        Ok(Self { labels, values })
    }

    pub fn transpose(&self) -> Self {
        let n = self.n();
        Self {
            labels: self.labels.clone(),
            values: (0..n).map(|i| (0..n).map(|j| self.values[j][i]).collect()).collect(),
        }
    }

    /// Mean diagonal entry.
    pub fn mean_diagonal(&self) -> f64 {
        (0..self.n()).map(|i| self.values[i][i]).sum::<f64>() / self.n() as f64
    }

    /// Reorders rows and columns so that labels with equal `group` values are
    /// adjacent (stable within a group).
    pub fn permuted_by(&self, group: impl Fn(usize) -> u64) -> Self {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by_key(|&i| (group(self.labels[i]), i));
        Self {
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            values: order.iter().map(|&i| order.iter().map(|&j| self.values[i][j]).collect()).collect(),
        }
    }

    /// CSV with a header row and a first column of label names.
    pub fn write_csv(&self, path: &Path, names: &dyn Fn(usize) -> String) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend(self.labels.iter().map(|&l| names(l)));
        w.write_record(&header)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![names(self.labels[i])];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Agent or subpopulation matrix from a trained classifier over a test set.
pub fn prediction_matrix<M: SequenceClassifier>(
    model: &M,
    test: &[&TokenSequence],
    batch_size: usize,
) -> Result<PredictionMatrix, AnalysisError> {
    let mut probs = Vec::with_capacity(test.len());
    for part in test.chunks(batch_size.max(1)) {
        let toks: Vec<&[u32]> = part.iter().map(|s| s.tokens.as_slice()).collect();
        probs.extend(model.predict_proba(&toks)?);
    }
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    PredictionMatrix::from_probs(&truth, &probs, model.n_classes())
}

/// Location matrix from masked-position predictions: labels are cell token
/// ids, rows average the decoder's distribution over cell tokens. Each test
/// sequence is masked `repeats` times; cells masked fewer than `min_count`
/// times are dropped (0 keeps all).
pub fn location_prediction_matrix(
    model: &EncoderModel,
    vocab: &Vocabulary,
    test: &[&TokenSequence],
    repeats: usize,
    min_count: usize,
    seed: u64,
) -> Result<PredictionMatrix, AnalysisError> {
    let cfg = model.config();
    let n_cells = vocab.n_cells;
    let mut rng = stream_rng(seed, "location-mask");
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for _ in 0..repeats.max(1) {
        for part in test.chunks(128) {
            let mb = mask_batch(part, cfg.mask_fraction, cfg.mask_id, &mut rng);
            if mb.n_masked() == 0 {
                continue;
            }
            let probs = model.mlm_probs(&mb)?;
            for (p, t) in probs.iter().zip(mb.targets()) {
                let e = sums.entry(t).or_insert_with(|| (vec![0.0; n_cells], 0));
                // cell tokens are ids 1..=n_cells
                let mass: f64 = p[1..=n_cells].iter().sum();
                for (a, &b) in e.0.iter_mut().zip(&p[1..=n_cells]) {
                    *a += b / mass;
                }
                e.1 += 1;
            }
        }
    }
    let kept: Vec<usize> = sums.iter().filter(|(_, (_, c))| *c >= min_count).map(|(&t, _)| t).collect();
    if kept.len() < sums.len() {
        warn!("{} cells masked fewer than {min_count} times were dropped", sums.len() - kept.len());
    }
    let values = kept
        .iter()
        .map(|t| {
            let (row, c) = &sums[t];
            let mut r: Vec<f64> = kept.iter().map(|&j| row[j - 1] / *c as f64).collect();
            let s: f64 = r.iter().sum();
            if s > 0.0 {
                r.iter_mut().for_each(|v| *v /= s);
            }
            r
        })
        .collect();
    Ok(PredictionMatrix { labels: kept, values })
}

/// Connected components (of size ≥ 2) of the graph linking labels `i`, `j`
/// when `max(P_ij, P_ji) ≥ threshold`. Groups hold label ids, ascending.
pub fn misclassification_blocks(p: &PredictionMatrix, threshold: f64) -> Vec<Vec<usize>> {
    let n = p.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if p.values[i][j].max(p.values[j][i]) >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(p.labels[i]);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() > 1).collect();
    out.iter_mut().for_each(|g| g.sort_unstable());
    out.sort();
    out
}

/// Fraction of within-group label pairs for which `same(a, b)` holds;
/// `None` when there are no groups.
pub fn grouped_pair_agreement(groups: &[Vec<usize>], same: impl Fn(usize, usize) -> bool) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for g in groups {
        for (i, &a) in g.iter().enumerate() {
            for &b in &g[i + 1..] {
                total += 1;
                hit += same(a, b) as usize;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}
