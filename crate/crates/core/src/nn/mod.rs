//! Minimal dense numerical core: tensors, a differentiable op tape, Adam and
//! checkpoints. Everything is `f64`.

mod adam;
mod checkpoint;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zeroed gradient buffers, one per tensor.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect()
    }

    /// Overwrites values from named tensors; every name and shape must match.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<(), NnError> {
        if named.len() != self.tensors.len() {
            return Err(NnError::Checkpoint(format!("expected {} tensors, found {}", self.tensors.len(), named.len())));
        }
        for nt in named {
            let idx =
                self.index_of(&nt.name).ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {}", nt.name)))?;
            if self.tensors[idx].shape() != nt.shape.as_slice() {
                return Err(NnError::ShapeMismatch {
                    op: "load_named",
                    lhs: self.tensors[idx].shape().to_vec(),
                    rhs: nt.shape.clone(),
                });
            }
            self.tensors[idx] = Tensor::new(nt.shape.clone(), nt.data.clone())?;
        }
        Ok(())
    }
}
