//! Optimizer, training loops for the three model regimes, and the domain
//! probe.

mod loops;
mod optim;
mod probe;

pub(crate) use loops::eval_batches;
pub use loops::{epoch_batches, train_general, train_joint, train_specific, TrainOutcome};
pub use optim::{check_finite, clip_gradients, global_norm, AdamState};
pub use probe::{probe_domain_accuracy, ProbeReport};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    pub lambda_adv: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dev_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Per-epoch probability of replacing a singleton training word by UNK.
    pub singleton_unk: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            clip_norm: 5.0,
            dropout: 0.5,
            lambda_adv: 0.0,
            max_epochs: 50,
            patience: 3,
            dev_fraction: 0.1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            singleton_unk: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return fail(format!("lambda_adv {} must be finite and ≥ 0", self.lambda_adv));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 0.5) {
            return fail(format!("dev_fraction {} must lie in (0, 0.5)", self.dev_fraction));
        }
        if !(0.0..=1.0).contains(&self.singleton_unk) {
            return fail(format!("singleton_unk {} must lie in [0, 1]", self.singleton_unk));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    /// Independent random stream `k` of this run.
    pub fn rng(&self, k: Stream) -> RngState {
        RngState::stream(self.seed, k as u64)
    }
}

/// Named random streams, so that e.g. the dev split does not depend on how
/// many draws initialization consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    DevSplit = 1,
    Batches = 2,
    Dropout = 3,
    Probe = 4,
}

/// Encoder and head sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embedding_dim: 128,
            hidden_dim: 128,
            mlp_hidden_dim: 128,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub l_y: f64,
    pub l_d: Option<f64>,
    /// Chunk F1 of the split in eval mode, after the epoch's updates.
    pub f1: Option<f64>,
    pub probe_acc: Option<f64>,
    /// Largest post-clip global gradient norm of the epoch.
    pub grad_norm: Option<f64>,
    pub wall_clock: f64,
}

impl EpochRecord {
    /// JSON line without the trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Deterministic per-domain hold-out: `round(n·fraction)` utterances of
/// every domain with at least two, at least one each. Returns sorted train
/// and dev index lists.
pub fn split_dev(corpus: &[Utterance], fraction: f64, rng: &mut RngState) -> (Vec<usize>, Vec<usize>) {
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.iter().enumerate() {
        by_domain.entry(u.domain.as_str()).or_default().push(i);
    }
    let mut dev = Vec::new();
    for idx in by_domain.values_mut() {
        if idx.len() < 2 {
            continue;
        }
        rng.shuffle(idx);
        let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        dev.extend_from_slice(&idx[..k]);
    }
    dev.sort_unstable();
    let mut is_dev = vec![false; corpus.len()];
    dev.iter().for_each(|&i| is_dev[i] = true);
    let train = (0..corpus.len()).filter(|&i| !is_dev[i]).collect();
    (train, dev)
}
