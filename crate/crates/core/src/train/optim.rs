use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

use super::TrainConfig;

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `clip_norm / g` when the global norm `g`
/// exceeds `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Fails on the first non-finite gradient entry.
pub fn check_finite(grads: &[Tensor], params: &ParamStore, batch: usize) -> Result<()> {
    for (g, (name, _)) in grads.iter().zip(params.iter()) {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                batch,
                param: name.to_string(),
            });
        }
    }
    Ok(())
}

/// Adam moments for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        AdamState {
            names: params.iter().map(|(n, _)| n.to_string()).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if name != self.names[k] || p.len() != g.len() {
                return Err(Error::Contract(format!(
                    "optimizer state does not match parameter {name:?}"
                )));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
