//! Slot-filling models: the Bi-LSTM tagger (optionally with an adversarial
//! attention domain classifier) and the joint frozen-encoder ensemble.

mod checkpoint;
mod joint;
mod slot;

pub use checkpoint::{Checkpoint, ModelKind, StoredModel, CHECKPOINT_VERSION};
pub use joint::{stack_states, JointConfig, JointModel};
pub use slot::{
    attention_pool, domain_loss, encode, mlp, slot_loss, total_loss, DomainVars, EncoderStates, EncoderVars, Forward,
    HeadVars, LossBundle, SlotModel,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Dropout on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden_dim: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub num_slot_labels: usize,
    pub num_domains: usize,
    pub lambda_adv: f64,
}

impl ModelConfig {
    /// Sizes used throughout the original experiments, for the given tables.
    pub fn with_sizes(vocab_size: usize, num_slot_labels: usize, num_domains: usize) -> Self {
        ModelConfig {
            embedding_dim: 128,
            hidden_dim: 128,
            mlp_hidden_dim: 128,
            dropout_rate: 0.5,
            vocab_size,
            num_slot_labels,
            num_domains,
            lambda_adv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("vocab_size", self.vocab_size),
            ("num_slot_labels", self.num_slot_labels),
            ("num_domains", self.num_domains),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_adv {} must be a finite value ≥ 0",
                self.lambda_adv
            )));
        }
        Ok(())
    }

    /// Width of the concatenated forward/backward encoder state.
    pub fn state_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn adversarial(&self) -> bool {
        self.lambda_adv > 0.0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Entries whose name starts with `prefix.`, with the prefix removed.
    pub fn sub(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Appends every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Places every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, (n, t)) in self.entries.iter().enumerate() {
            vars.push(tape.leaf(t.clone(), trainable));
            index.insert(n.clone(), i);
        }
        Bound { vars, index }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Accumulated gradients in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

fn bias(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

/// Glorot weights and zero biases for a one-hidden-layer MLP.
fn init_mlp(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut RngState) {
    store.insert(format!("{prefix}.w1"), Tensor::glorot(input, hidden, rng));
    store.insert(format!("{prefix}.b1"), bias(hidden));
    store.insert(format!("{prefix}.w2"), Tensor::glorot(hidden, output, rng));
    store.insert(format!("{prefix}.b2"), bias(output));
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
