use std::collections::BTreeSet;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderModel;
use super::masking::mask_batch;
use super::ModelError;
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, NodeId, ParamStore};
use crate::sim::stream_rng;
use crate::traj::TokenSequence;

/// Anything with a trainable parameter store.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

/// Sequence-level classifier over token ids.
pub trait SequenceClassifier: Trainable {
    fn n_classes(&self) -> usize;

    /// `[batch × n_classes]` logits; `rng` switches on training-mode dropout.
    fn class_logits(&self, g: &mut Graph, batch: &[&[u32]], rng: Option<&mut ChaCha8Rng>)
        -> Result<NodeId, ModelError>;

    fn predict_proba(&self, batch: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new(self.params().tensors());
        let logits = self.class_logits(&mut g, batch, None)?;
        let probs = g.softmax(logits, None)?;
        Ok(g.value(probs).chunks(self.n_classes()).map(<[f64]>::to_vec).collect())
    }
}

impl Trainable for EncoderModel {
    fn params(&self) -> &ParamStore {
        EncoderModel::params(self)
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        EncoderModel::params_mut(self)
    }
}

impl SequenceClassifier for EncoderModel {
    fn n_classes(&self) -> usize {
        self.config().n_classes
    }
    fn class_logits(
        &self,
        g: &mut Graph,
        batch: &[&[u32]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        EncoderModel::class_logits(self, g, batch, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub train_fraction: f64,
    /// Stop after this many epochs without a better test accuracy.
    pub patience: Option<usize>,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            adam: AdamConfig::default(),
            train_fraction: 0.85,
            patience: Some(50),
            eval_batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the untrained model.
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Seeded train/test split of `0..n`. Both sides are non-empty for n ≥ 2.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    if n < 2 {
        return Err(ModelError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ModelError::InvalidConfig("train_fraction must be in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "split"));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

pub fn write_metric_log(path: &Path, log: &[EpochMetrics]) -> Result<(), ModelError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ModelError::Io(e.to_string()))?;
    for m in log {
        w.serialize(m).map_err(|e| ModelError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| ModelError::Io(e.to_string()))?;
    Ok(())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

type LossFn<'a, M> = dyn Fn(&M, &mut Graph, &[&TokenSequence], &mut ChaCha8Rng) -> Result<NodeId, ModelError> + 'a;
type EvalFn<'a, M> = dyn Fn(&M, &[&TokenSequence]) -> Result<f64, ModelError> + 'a;

/// Shared minibatch Adam loop. Shuffle order, dropout and masking all come
/// from streams of `cfg.seed`, so a repeat run reproduces the log exactly.
/// The parameters with the best test score are restored at the end.
fn fit<M: Trainable>(
    model: &mut M,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    loss_fn: &LossFn<M>,
    init_loss: &EvalFn<M>,
    eval_fn: &EvalFn<M>,
) -> Result<TrainReport, ModelError> {
    if cfg.batch_size == 0 || cfg.eval_batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch sizes must be positive".into()));
    }
    let (train_idx, test_idx) = split_indices(data.len(), cfg.train_fraction, cfg.seed)?;
    let train: Vec<&TokenSequence> = train_idx.iter().map(|&i| &data[i]).collect();
    let test: Vec<&TokenSequence> = test_idx.iter().map(|&i| &data[i]).collect();

    let mut log =
        vec![EpochMetrics { epoch: 0, train_loss: init_loss(model, &train)?, test_acc: eval_fn(model, &test)? }];
    let mut best = (0, log[0].test_acc, model.params().clone());
    let mut adam = AdamState::new(model.params().tensors());
    let mut shuffle_rng = stream_rng(cfg.seed, "shuffle");
    let mut step_rng = stream_rng(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| train[i]).collect();
            let mut grads = model.params().zero_grads();
            {
                let mut g = Graph::new(model.params().tensors());
                let loss = loss_fn(model, &mut g, &batch, &mut step_rng)?;
                total += g.value(loss)[0] * batch.len() as f64;
                let gr = g.backward(loss)?;
                g.accumulate_param_grads(&gr, &mut grads);
            }
            adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, &cfg.adam)?;
        }
        let m = EpochMetrics { epoch, train_loss: total / train.len() as f64, test_acc: eval_fn(model, &test)? };
        info!("epoch {epoch}: train loss {:.5}, test acc {:.4}", m.train_loss, m.test_acc);
        log.push(m);
        if m.test_acc > best.1 {
            best = (epoch, m.test_acc, model.params().clone());
        }
        if cfg.patience.is_some_and(|p| epoch - best.0 >= p) {
            info!("no test improvement for {} epochs, stopping", epoch - best.0);
            break;
        }
    }
    *model.params_mut() = best.2;
    Ok(TrainReport { log, best_epoch: best.0, best_test_acc: best.1, train_idx, test_idx })
}

/// Fraction of sequences whose argmax class equals the label.
pub fn classification_accuracy<M: SequenceClassifier>(
    model: &M,
    seqs: &[&TokenSequence],
    batch_size: usize,
) -> Result<f64, ModelError> {
    if seqs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for part in seqs.chunks(batch_size.max(1)) {
        let toks: Vec<&[u32]> = part.iter().map(|s| s.tokens.as_slice()).collect();
        let probs = model.predict_proba(&toks)?;
        correct += probs.iter().zip(part).filter(|(p, s)| argmax(p) == s.label).count();
    }
    Ok(correct as f64 / seqs.len() as f64)
}

fn classification_loss<M: SequenceClassifier>(
    model: &M,
    g: &mut Graph,
    batch: &[&TokenSequence],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ModelError> {
    let toks: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let logits = model.class_logits(g, &toks, rng)?;
    Ok(g.cross_entropy(logits, &labels, None)?)
}

fn check_labels(data: &[TokenSequence], n_classes: usize) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let labels: BTreeSet<usize> = data.iter().map(|s| s.label).collect();
    if labels.len() < 2 {
        return Err(ModelError::SingleClass);
    }
    let max = *labels.iter().next_back().expect("non-empty");
    if max >= n_classes {
        return Err(ModelError::LabelOutOfRange { label: max, n_classes });
    }
    Ok(())
}

/// Trains any sequence classifier with cross-entropy on the labels.
pub fn train_classifier<M: SequenceClassifier>(
    model: &mut M,
    data: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    check_labels(data, model.n_classes())?;
    let eval_bs = cfg.eval_batch_size;
    let loss =
        |m: &M, g: &mut Graph, b: &[&TokenSequence], rng: &mut ChaCha8Rng| classification_loss(m, g, b, Some(rng));
    let init = |m: &M, seqs: &[&TokenSequence]| -> Result<f64, ModelError> {
        let mut total = 0.0;
        for part in seqs.chunks(eval_bs) {
            let mut g = Graph::new(m.params().tensors());
            let l = classification_loss(m, &mut g, part, None)?;
            total += g.value(l)[0] * part.len() as f64;
        }
        Ok(total / seqs.len() as f64)
    };
    let eval = |m: &M, seqs: &[&TokenSequence]| classification_accuracy(m, seqs, eval_bs);
    fit(model, data, cfg, &loss, &init, &eval)
}

/// Masked-position accuracy under a fixed, seeded set of masks.
pub fn mlm_accuracy(
    model: &EncoderModel,
    seqs: &[&TokenSequence],
    batch_size: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let (correct, total) = mlm_counts(model, seqs, batch_size, seed)?;
    Ok(if total == 0 { f64::NAN } else { correct as f64 / total as f64 })
}

/// Correct and total masked predictions under the same masks as [`mlm_accuracy`].
pub fn mlm_counts(
    model: &EncoderModel,
    seqs: &[&TokenSequence],
    batch_size: usize,
    seed: u64,
) -> Result<(usize, usize), ModelError> {
    let cfg = model.config();
    let mut rng = stream_rng(seed, "eval-mask");
    let (mut correct, mut total) = (0, 0);
    for part in seqs.chunks(batch_size.max(1)) {
        let mb = mask_batch(part, cfg.mask_fraction, cfg.mask_id, &mut rng);
        if mb.n_masked() == 0 {
            continue;
        }
        let probs = model.mlm_probs(&mb)?;
        correct += probs.iter().zip(mb.targets()).filter(|(p, t)| argmax(p) == *t).count();
        total += mb.n_masked();
    }
    Ok((correct, total))
}

/// Mean masked-position cross-entropy under seeded masks, no dropout.
pub fn mlm_eval_loss(
    model: &EncoderModel,
    seqs: &[&TokenSequence],
    batch_size: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let cfg = model.config();
    let mut rng = stream_rng(seed, "init-mask");
    let (mut sum, mut n) = (0.0, 0);
    for part in seqs.chunks(batch_size.max(1)) {
        let mb = mask_batch(part, cfg.mask_fraction, cfg.mask_id, &mut rng);
        if mb.n_masked() == 0 {
            continue;
        }
        let mut g = Graph::new(model.params().tensors());
        let l = model.mlm_loss(&mut g, &mb, None)?;
        sum += g.value(l)[0] * mb.n_masked() as f64;
        n += mb.n_masked();
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Masked location modeling: each minibatch gets fresh masks.
pub fn train_mlm(
    model: &mut EncoderModel,
    data: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (eval_bs, seed) = (cfg.eval_batch_size, cfg.seed);
    let loss = |m: &EncoderModel, g: &mut Graph, b: &[&TokenSequence], rng: &mut ChaCha8Rng| {
        let mc = m.config();
        let mb = mask_batch(b, mc.mask_fraction, mc.mask_id, rng);
        m.mlm_loss(g, &mb, Some(rng))
    };
    let init = |m: &EncoderModel, s: &[&TokenSequence]| mlm_eval_loss(m, s, eval_bs, seed);
    let eval = |m: &EncoderModel, s: &[&TokenSequence]| mlm_accuracy(m, s, eval_bs, seed);
    fit(model, data, cfg, &loss, &init, &eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_a_seeded_partition() {
        let (a, b) = split_indices(100, 0.85, 3).unwrap();
        assert_eq!((a.len(), b.len()), (85, 15));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.85, 3).unwrap(), (a.clone(), b));
        assert_ne!(split_indices(100, 0.85, 4).unwrap().0, a);
        assert!(split_indices(1, 0.85, 0).is_err());
        assert_eq!(split_indices(2, 0.99, 0).unwrap().1.len(), 1);
    }

    #[test]
    fn argmax_takes_first_of_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
