use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::traj::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Sequence label from position 0 (agent or subpopulation).
    Classification,
    /// Masked location modeling.
    Mlm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Ignored for the masked task.
    pub n_classes: usize,
    pub vocab_size: usize,
    pub pad_id: u32,
    pub mask_id: u32,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub mask_fraction: f64,
    pub positional: Positional,
    pub norm: NormPlacement,
    pub init_std: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            n_classes: 2,
            vocab_size: 8,
            pad_id: 0,
            mask_id: 7,
            max_len: 64,
            dropout_rate: 0.1,
            mask_fraction: 0.15,
            positional: Positional::Learned,
            norm: NormPlacement::Pre,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized for a vocabulary.
    pub fn for_vocab(vocab: &Vocabulary, task: Task, n_classes: usize) -> Self {
        Self {
            task,
            n_classes,
            vocab_size: vocab.size(),
            pad_id: vocab.special_ids.pad,
            mask_id: vocab.special_ids.mask,
            max_len: vocab.seq_len(),
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("n_layers, d_ff and max_len must be positive");
        }
        if self.positional == Positional::Sinusoidal && self.d_model % 2 != 0 {
            return bad("sinusoidal positions need an even d_model");
        }
        if self.vocab_size < 2 || self.pad_id as usize >= self.vocab_size || self.mask_id as usize >= self.vocab_size {
            return bad("pad and mask ids must lie inside the vocabulary");
        }
        if self.task == Task::Classification && self.n_classes < 2 {
            return bad("classification needs at least two classes");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad("mask_fraction must be in (0, 1)");
        }
        if !(self.init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            return bad("init_std and layer_norm_eps must be positive");
        }
        Ok(())
    }
}
