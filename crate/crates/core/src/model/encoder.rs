use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, NormPlacement, Positional, Task};
use super::masking::MaskedBatch;
use super::ModelError;
use crate::nn::{Checkpoint, Graph, NodeId, ParamStore, Tensor};
use crate::sim::stream_rng;

pub const MODEL_TYPE: &str = "stare";

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

/// Transformer encoder with an optional classifier head on position 0 and an
/// optional bias-free decoder for masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: usize,
    pos_emb: Option<usize>,
    layers: Vec<Layer>,
    final_ln: Option<(usize, usize)>,
    classifier: Option<[usize; 4]>,
    decoder: Option<usize>,
}

/// Encoder output for a batch: `[n_seq·len × d_model]` rows.
pub struct Encoded {
    pub hidden: NodeId,
    pub n_seq: usize,
    pub len: usize,
}

fn sinusoidal(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, dim], data).expect("sized buffer")
}

impl EncoderModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, "init");
        let std = config.init_std;
        let (k, f) = (config.d_model, config.d_ff);
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            (
                p.add(format!("{name}.weight"), Tensor::randn(vec![rows, cols], std, rng)),
                p.add(format!("{name}.bias"), Tensor::zeros(vec![cols])),
            )
        };
        let norm = |p: &mut ParamStore, name: &str| {
            (
                p.add(format!("{name}.gain"), Tensor::filled(vec![k], 1.0)),
                p.add(format!("{name}.bias"), Tensor::zeros(vec![k])),
            )
        };
        let tok_emb = p.add("embed.tokens", Tensor::randn(vec![config.vocab_size, k], std, &mut rng));
        let pos_emb = (config.positional == Positional::Learned)
            .then(|| p.add("embed.positions", Tensor::randn(vec![config.max_len, k], std, &mut rng)));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("layers.{l}");
            layers.push(Layer {
                ln1: norm(&mut p, &format!("{pre}.ln1")),
                wq: linear(&mut p, &format!("{pre}.attn.q"), k, k, &mut rng),
                wk: linear(&mut p, &format!("{pre}.attn.k"), k, k, &mut rng),
                wv: linear(&mut p, &format!("{pre}.attn.v"), k, k, &mut rng),
                wo: linear(&mut p, &format!("{pre}.attn.out"), k, k, &mut rng),
                ln2: norm(&mut p, &format!("{pre}.ln2")),
                ff1: linear(&mut p, &format!("{pre}.ff.in"), k, f, &mut rng),
                ff2: linear(&mut p, &format!("{pre}.ff.out"), f, k, &mut rng),
            });
        }
        let final_ln = (config.norm == NormPlacement::Pre).then(|| norm(&mut p, "final_ln"));
        let (classifier, decoder) = match config.task {
            Task::Classification => {
                let (w1, b1) = linear(&mut p, "classifier.hidden", k, k, &mut rng);
                let (w2, b2) = linear(&mut p, "classifier.out", k, config.n_classes, &mut rng);
                (Some([w1, b1, w2, b2]), None)
            }
            Task::Mlm => {
                (None, Some(p.add("decoder.weight", Tensor::randn(vec![k, config.vocab_size], std, &mut rng))))
            }
        };
        Ok(Self { config, params: p, tok_emb, pos_emb, layers, final_ln, classifier, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(ModelError::BadLength { len: tokens.len(), max: self.config.max_len });
        }
        if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.config.vocab_size) {
            return Err(ModelError::UnknownToken { id, pos });
        }
        Ok(())
    }

    /// Runs the encoder stack over equal-length sequences. `rng` enables dropout.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        batch: &[&[u32]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded, ModelError> {
        let cfg = &self.config;
        let n_seq = batch.len();
        let len = batch.first().map_or(0, |s| s.len());
        if n_seq == 0 {
            return Err(ModelError::EmptyDataset);
        }
        for s in batch {
            if s.len() != len {
                return Err(ModelError::BadLength { len: s.len(), max: len });
            }
            self.check_tokens(s)?;
        }
        let (k, heads) = (cfg.d_model, cfg.n_heads);
        let rate = if rng.is_some() { cfg.dropout_rate } else { 0.0 };
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = (0..n_seq).flat_map(|_| 0..len).collect();

        let table = g.param(self.tok_emb);
        let mut x = g.embedding(table, &ids)?;
        let pos_table = match self.pos_emb {
            Some(i) => g.param(i),
            None => g.constant(sinusoidal(len, k)),
        };
        let pos = g.embedding(pos_table, &positions)?;
        x = g.add(x, pos)?;
        if let Some(r) = rng.as_deref_mut() {
            x = g.dropout(x, rate, r);
        }

        // one mask row per (sequence, head) matrix
        let mut mask = Vec::with_capacity(n_seq * heads * len);
        for s in batch {
            let row: Vec<f64> = s.iter().map(|&t| if t == cfg.pad_id { f64::NEG_INFINITY } else { 0.0 }).collect();
            for _ in 0..heads {
                mask.extend_from_slice(&row);
            }
        }
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        for layer in &self.layers {
            let h = match cfg.norm {
                NormPlacement::Pre => self.norm(g, x, layer.ln1)?,
                NormPlacement::Post => x,
            };
            let q = self.linear(g, h, layer.wq)?;
            let kk = self.linear(g, h, layer.wk)?;
            let v = self.linear(g, h, layer.wv)?;
            let q = g.split_heads(q, n_seq, len, heads)?;
            let kk = g.split_heads(kk, n_seq, len, heads)?;
            let v = g.split_heads(v, n_seq, len, heads)?;
            let scores = g.matmul_nt(q, kk)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax(scores, Some(&mask))?;
            let ctx = g.matmul(att, v)?;
            let ctx = g.merge_heads(ctx, n_seq, len, heads)?;
            let mut o = self.linear(g, ctx, layer.wo)?;
            if let Some(r) = rng.as_deref_mut() {
                o = g.dropout(o, rate, r);
            }
            x = g.add(x, o)?;
            if cfg.norm == NormPlacement::Post {
                x = self.norm(g, x, layer.ln1)?;
            }

            let h = match cfg.norm {
                NormPlacement::Pre => self.norm(g, x, layer.ln2)?,
                NormPlacement::Post => x,
            };
            let f = self.linear(g, h, layer.ff1)?;
            let f = g.gelu(f);
            let mut f = self.linear(g, f, layer.ff2)?;
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, rate, r);
            }
            x = g.add(x, f)?;
            if cfg.norm == NormPlacement::Post {
                x = self.norm(g, x, layer.ln2)?;
            }
        }
        if let Some(ln) = self.final_ln {
            x = self.norm(g, x, ln)?;
        }
        Ok(Encoded { hidden: x, n_seq, len })
    }

    fn linear(&self, g: &mut Graph, x: NodeId, (w, b): (usize, usize)) -> Result<NodeId, ModelError> {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, (gain, bias): (usize, usize)) -> Result<NodeId, ModelError> {
        let (gain, bias) = (g.param(gain), g.param(bias));
        Ok(g.layer_norm(x, gain, bias, self.config.layer_norm_eps)?)
    }

    /// Position-0 rows of an encoded batch, `[n_seq × d_model]`.
    pub fn first_positions(&self, g: &mut Graph, enc: &Encoded) -> Result<NodeId, ModelError> {
        let idx: Vec<usize> = (0..enc.n_seq).map(|s| s * enc.len).collect();
        Ok(g.gather_rows(enc.hidden, &idx)?)
    }

    /// Classifier MLP applied to position 0 only.
    pub fn class_logits(
        &self,
        g: &mut Graph,
        batch: &[&[u32]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        let [w1, b1, w2, b2] = self.classifier.ok_or(ModelError::WrongTask("classification"))?;
        let enc = self.encode_graph(g, batch, rng)?;
        let first = self.first_positions(g, &enc)?;
        let h = self.linear(g, first, (w1, b1))?;
        let h = g.gelu(h);
        self.linear(g, h, (w2, b2))
    }

    /// Decoder logits `[n_masked × vocab]` at the masked positions of a batch,
    /// in the batch's (sequence, position) order.
    pub fn mlm_logits(
        &self,
        g: &mut Graph,
        batch: &MaskedBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        let dec = self.decoder.ok_or(ModelError::WrongTask("mlm"))?;
        let inputs: Vec<&[u32]> = batch.inputs.iter().map(Vec::as_slice).collect();
        let enc = self.encode_graph(g, &inputs, rng)?;
        let rows: Vec<usize> =
            batch.positions.iter().enumerate().flat_map(|(s, ps)| ps.iter().map(move |&p| s * enc.len + p)).collect();
        if rows.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let picked = g.gather_rows(enc.hidden, &rows)?;
        let d = g.param(dec);
        Ok(g.matmul(picked, d)?)
    }

    /// Mean cross-entropy over the masked positions only.
    pub fn mlm_loss(
        &self,
        g: &mut Graph,
        batch: &MaskedBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        let logits = self.mlm_logits(g, batch, rng)?;
        Ok(g.cross_entropy(logits, &batch.targets(), None)?)
    }

    /// Per-token encodings of one sequence, `[len × d_model]`, eval mode.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(self.params.tensors());
        let enc = self.encode_graph(&mut g, &[tokens], None)?;
        Ok(g.tensor(enc.hidden))
    }

    /// Class probabilities for each sequence.
    pub fn classify_batch(&self, batch: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new(self.params.tensors());
        let logits = self.class_logits(&mut g, batch, None)?;
        let probs = g.softmax(logits, None)?;
        Ok(g.value(probs).chunks(self.config.n_classes).map(<[f64]>::to_vec).collect())
    }

    pub fn classify(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        Ok(self.classify_batch(&[tokens])?.remove(0))
    }

    /// Softmax over the vocabulary at every masked position, in batch order.
    pub fn mlm_probs(&self, batch: &MaskedBatch) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new(self.params.tensors());
        let logits = self.mlm_logits(&mut g, batch, None)?;
        let probs = g.softmax(logits, None)?;
        Ok(g.value(probs).chunks(self.config.vocab_size).map(<[f64]>::to_vec).collect())
    }

    /// Position-0 encodings `[n × d_model]` of many sequences, in chunks.
    pub fn embeddings(&self, seqs: &[&[u32]], chunk: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new(self.params.tensors());
            let enc = self.encode_graph(&mut g, part, None)?;
            let first = self.first_positions(&mut g, &enc)?;
            out.extend(g.value(first).chunks(self.config.d_model).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ModelError> {
        Ok(Checkpoint::new(
            MODEL_TYPE,
            serde_json::to_value(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
            self.params.to_named(),
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.model_type != MODEL_TYPE {
            return Err(ModelError::Checkpoint(format!("expected a {MODEL_TYPE} checkpoint, found {}", ck.model_type)));
        }
        let config: ModelConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut m = Self::new(config)?;
        m.params.load_named(&ck.tensors)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
