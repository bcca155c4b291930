//! LSTM and BiLSTM sequence classifiers over the same token sequences the
//! encoder sees.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, SequenceClassifier, Trainable};
use crate::nn::{Checkpoint, Graph, NodeId, ParamStore, Tensor};
use crate::sim::stream_rng;
use crate::traj::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecurrentConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub n_stacks: usize,
    pub bidirectional: bool,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub pad_id: u32,
    pub seed: u64,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            hidden_dim: 64,
            n_stacks: 2,
            bidirectional: false,
            n_classes: 2,
            vocab_size: 8,
            pad_id: 0,
            seed: 0,
        }
    }
}

impl RecurrentConfig {
    pub fn for_vocab(vocab: &Vocabulary, n_classes: usize, bidirectional: bool) -> Self {
        Self { n_classes, vocab_size: vocab.size(), pad_id: vocab.special_ids.pad, bidirectional, ..Self::default() }
    }

    pub fn model_type(&self) -> &'static str {
        if self.bidirectional {
            "bilstm"
        } else {
            "lstm"
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.n_stacks == 0 || self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig("recurrent dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(ModelError::InvalidConfig("classification needs at least two classes".into()));
        }
        if self.pad_id as usize >= self.vocab_size {
            return Err(ModelError::InvalidConfig("pad id outside the vocabulary".into()));
        }
        Ok(())
    }
}

/// Input weights `[in × 4H]`, recurrent weights `[H × 4H]`, bias `[4H]`;
/// gate order along columns is input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    wx: usize,
    wh: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    config: RecurrentConfig,
    params: ParamStore,
    embed: usize,
    /// `cells[stack][direction]`
    cells: Vec<Vec<Cell>>,
    head: (usize, usize),
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("sized buffer")
}

impl LstmModel {
    pub fn new(config: RecurrentConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, "init");
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        let dirs = if config.bidirectional { 2 } else { 1 };
        let bound = 1.0 / (h as f64).sqrt();
        let mut p = ParamStore::new();
        let embed = p.add("embed.tokens", Tensor::randn(vec![config.vocab_size, e], 1.0, &mut rng));
        let mut cells = Vec::with_capacity(config.n_stacks);
        for s in 0..config.n_stacks {
            let input = if s == 0 { e } else { h * dirs };
            let mut row = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let name = format!("lstm.{s}.{}", if d == 0 { "fwd" } else { "bwd" });
                let mut bias = uniform(vec![4 * h], bound, &mut rng);
                // forget gate starts open
                bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b += 1.0);
                row.push(Cell {
                    wx: p.add(format!("{name}.input"), uniform(vec![input, 4 * h], bound, &mut rng)),
                    wh: p.add(format!("{name}.recurrent"), uniform(vec![h, 4 * h], bound, &mut rng)),
                    b: p.add(format!("{name}.bias"), bias),
                });
            }
            cells.push(row);
        }
        let d = h * dirs;
        let hb = 1.0 / (d as f64).sqrt();
        let head = (
            p.add("head.weight", uniform(vec![d, config.n_classes], hb, &mut rng)),
            p.add("head.bias", uniform(vec![config.n_classes], hb, &mut rng)),
        );
        Ok(Self { config, params: p, embed, cells, head })
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    /// One direction of one stack. Returns the per-step hidden states (in
    /// sequence order) and the final state. PAD steps carry the state through
    /// unchanged, so the final state is the one after the last real token.
    fn run_direction(
        &self,
        g: &mut Graph,
        cell: Cell,
        inputs: &[NodeId],
        keep: &[Vec<bool>],
        reverse: bool,
    ) -> Result<(Vec<NodeId>, NodeId), ModelError> {
        let h_dim = self.config.hidden_dim;
        let n = keep[0].len();
        let (wx, wh, b) = (g.param(cell.wx), g.param(cell.wh), g.param(cell.b));
        let mut h = g.constant(Tensor::zeros(vec![n, h_dim]));
        let mut c = g.constant(Tensor::zeros(vec![n, h_dim]));
        let mut outs = vec![h; inputs.len()];
        let order: Vec<usize> = if reverse { (0..inputs.len()).rev().collect() } else { (0..inputs.len()).collect() };
        for t in order {
            let xg = g.matmul(inputs[t], wx)?;
            let hg = g.matmul(h, wh)?;
            let gates = g.add(xg, hg)?;
            let gates = g.add_bias(gates, b)?;
            let i = g.slice_cols(gates, 0, h_dim)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h_dim, h_dim)?;
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * h_dim, h_dim)?;
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * h_dim, h_dim)?;
            let o = g.sigmoid(o);
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, cand)?;
            let c_new = g.add(fc, ig)?;
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc)?;
            c = g.select_rows(&keep[t], c_new, c)?;
            h = g.select_rows(&keep[t], h_new, h)?;
            outs[t] = h;
        }
        Ok((outs, h))
    }

    /// Final-state readout `[batch × H·directions]` of the top stack.
    pub fn final_states(&self, g: &mut Graph, batch: &[&[u32]]) -> Result<NodeId, ModelError> {
        let n = batch.len();
        let len = batch.first().map_or(0, |s| s.len());
        if n == 0 || len == 0 {
            return Err(ModelError::EmptyDataset);
        }
        for s in batch {
            if s.len() != len {
                return Err(ModelError::BadLength { len: s.len(), max: len });
            }
            if let Some((pos, &id)) = s.iter().enumerate().find(|(_, &t)| t as usize >= self.config.vocab_size) {
                return Err(ModelError::UnknownToken { id, pos });
            }
        }
        let keep: Vec<Vec<bool>> =
            (0..len).map(|t| batch.iter().map(|s| s[t] != self.config.pad_id).collect()).collect();
        let table = g.param(self.embed);
        let mut inputs = Vec::with_capacity(len);
        for t in 0..len {
            let ids: Vec<usize> = batch.iter().map(|s| s[t] as usize).collect();
            inputs.push(g.embedding(table, &ids)?);
        }
        let mut finals = Vec::new();
        for stack in &self.cells {
            let (fwd, fwd_last) = self.run_direction(g, stack[0], &inputs, &keep, false)?;
            finals = vec![fwd_last];
            if let Some(&bcell) = stack.get(1) {
                let (bwd, bwd_last) = self.run_direction(g, bcell, &inputs, &keep, true)?;
                finals.push(bwd_last);
                inputs = fwd.iter().zip(&bwd).map(|(&a, &b)| g.concat_cols(&[a, b])).collect::<Result<_, _>>()?;
            } else {
                inputs = fwd;
            }
        }
        Ok(if finals.len() == 1 { finals[0] } else { g.concat_cols(&finals)? })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ModelError> {
        Ok(Checkpoint::new(
            self.config.model_type(),
            serde_json::to_value(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
            self.params.to_named(),
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let config: RecurrentConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.model_type != config.model_type() {
            return Err(ModelError::Checkpoint(format!("model type {} does not match its config", ck.model_type)));
        }
        let mut m = Self::new(config)?;
        m.params.load_named(&ck.tensors)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }
}

impl Trainable for LstmModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl SequenceClassifier for LstmModel {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn class_logits(
        &self,
        g: &mut Graph,
        batch: &[&[u32]],
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        let h = self.final_states(g, batch)?;
        let (w, b) = (g.param(self.head.0), g.param(self.head.1));
        let y = g.matmul(h, w)?;
        Ok(g.add_bias(y, b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bidirectional: bool) -> LstmModel {
        LstmModel::new(RecurrentConfig {
            embedding_dim: 3,
            hidden_dim: 2,
            n_stacks: 2,
            bidirectional,
            n_classes: 3,
            vocab_size: 6,
            pad_id: 0,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn readout_width() {
        for (bi, w) in [(false, 2), (true, 4)] {
            let m = tiny(bi);
            let mut g = Graph::new(m.params().tensors());
            let h = m.final_states(&mut g, &[&[1, 2, 0], &[3, 0, 0]]).unwrap();
            assert_eq!(g.shape(h), &[2, w]);
        }
    }

    #[test]
    fn trailing_pad_does_not_change_output() {
        for bi in [false, true] {
            let m = tiny(bi);
            let a = m.predict_proba(&[&[1, 2, 3]]).unwrap();
            let b = m.predict_proba(&[&[1, 2, 3, 0, 0]]).unwrap();
            for (x, y) in a[0].iter().zip(&b[0]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = tiny(true);
        let back = LstmModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
