use catebounds_autodiff::{Gradients, Tape, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a trainable input.
    pub fn attach(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.iter()
            .map(|(n, v)| tape.param(n, v.clone()).map_err(Error::from))
            .collect()
    }

    /// Gradients aligned with the store; parameters that did not reach the
    /// root get zeros.
    pub fn gradients(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(vars)
            .map(|(v, var)| {
                grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }

    /// Replaces all values, checking names and shapes against `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// SHA-256 (hex) of names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.iter() {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        crate::hex(&h.finalize())
    }
}
