use std::rc::Rc;

use crate::autodiff::{lstm_step, LstmParams, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

use super::{argmax, bias, init_mlp, Bound, Mode, ModelConfig, ParamStore};

/// Embedding table plus forward and backward LSTM handles.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub embedding: Var,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderVars {
    pub fn from_bound(b: &Bound) -> Result<Self> {
        let lstm = |dir: &str| -> Result<LstmParams> {
            Ok(LstmParams {
                w_x: b.var(&format!("{dir}.w_x"))?,
                w_h: b.var(&format!("{dir}.w_h"))?,
                bias: b.var(&format!("{dir}.bias"))?,
            })
        };
        Ok(EncoderVars {
            embedding: b.var("embedding")?,
            forward: lstm("fwd")?,
            backward: lstm("bwd")?,
        })
    }
}

/// One-hidden-layer tanh MLP.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(HeadVars {
            w1: b.var(&format!("{prefix}.w1"))?,
            b1: b.var(&format!("{prefix}.b1"))?,
            w2: b.var(&format!("{prefix}.w2"))?,
            b2: b.var(&format!("{prefix}.b2"))?,
        })
    }
}

/// Attention scorer `g` and the domain MLP.
#[derive(Debug, Clone, Copy)]
pub struct DomainVars {
    pub score_w: Var,
    pub score_b: Var,
    pub head: HeadVars,
}

impl DomainVars {
    pub fn from_bound(b: &Bound) -> Result<Self> {
        Ok(DomainVars {
            score_w: b.var("dom.score_w")?,
            score_b: b.var("dom.score_b")?,
            head: HeadVars::from_bound(b, "dom")?,
        })
    }
}

/// Encoder output `[T_max·B, 2H]`, time-major.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub h: Var,
    pub batch: usize,
    pub t_max: usize,
    pub mask: Rc<Vec<bool>>,
}

impl EncoderStates {
    /// State of utterance `b` at step `t`.
    pub fn at<'t>(&self, tape: &'t Tape, b: usize, t: usize) -> &'t [f64] {
        tape.value(self.h).row(t * self.batch + b)
    }
}

/// Bi-LSTM over a padded batch. The backward direction starts from the last
/// real token of each row: padded steps leave its state untouched. Dropout
/// hits the embeddings and the concatenated outputs only.
pub fn encode(
    tape: &mut Tape,
    enc: &EncoderVars,
    batch: &Batch,
    mode: Mode,
    dropout: f64,
    rng: &mut RngState,
) -> Result<EncoderStates> {
    let (b, steps) = (batch.size, batch.t_max);
    let ids = batch.to_time_major(&batch.words);
    let mask = Rc::new(batch.to_time_major(&batch.mask));
    let vocab = tape.value(enc.embedding).shape()[0];
    if let Some(pos) = ids.iter().position(|&w| w >= vocab) {
        let row = pos % b;
        return Err(Error::Data(format!(
            "utterance {}: word id {} out of range for vocabulary of {vocab}",
            batch.origin.get(row).copied().unwrap_or(row),
            ids[pos]
        )));
    }
    let hidden = tape.value(enc.forward.w_h).shape()[0];

    let emb = tape.embedding(enc.embedding, &ids)?;
    let emb = tape.dropout(emb, dropout, mode.is_train(), rng)?;
    let xf = tape.matmul(emb, enc.forward.w_x)?;
    let xb = tape.matmul(emb, enc.backward.w_x)?;

    let zeros = tape.constant(Tensor::zeros(&[b, hidden]));
    let (mut h, mut c) = (zeros, zeros);
    let mut fwd = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.slice_rows(xf, t * b, b)?;
        (h, c) = lstm_step(tape, x, h, c, enc.forward.w_h, enc.forward.bias)?;
        fwd.push(h);
    }

    let (mut h, mut c) = (zeros, zeros);
    let mut bwd = vec![zeros; steps];
    for t in (0..steps).rev() {
        let x = tape.slice_rows(xb, t * b, b)?;
        let (hn, cn) = lstm_step(tape, x, h, c, enc.backward.w_h, enc.backward.bias)?;
        let m = Rc::new(mask[t * b..(t + 1) * b].to_vec());
        if m.iter().all(|&v| v) {
            (h, c) = (hn, cn);
        } else {
            h = tape.select_rows(m.clone(), hn, h)?;
            c = tape.select_rows(m, cn, c)?;
        }
        bwd[t] = h;
    }

    let hf = tape.concat_rows(&fwd)?;
    let hb = tape.concat_rows(&bwd)?;
    let h = tape.concat_cols(&[hf, hb])?;
    let h = tape.dropout(h, dropout, mode.is_train(), rng)?;
    Ok(EncoderStates {
        h,
        batch: b,
        t_max: steps,
        mask,
    })
}

/// `tanh(x·W1 + b1)·W2 + b2` — unnormalized scores.
pub fn mlp(tape: &mut Tape, head: &HeadVars, x: Var) -> Result<Var> {
    let z = tape.matmul(x, head.w1)?;
    let z = tape.add_row(z, head.b1)?;
    let z = tape.tanh(z);
    let z = tape.matmul(z, head.w2)?;
    tape.add_row(z, head.b2)
}

/// Per-utterance mean token cross entropy, averaged over the batch. Padded
/// steps carry zero weight.
pub fn slot_loss(tape: &mut Tape, logits: Var, batch: &Batch) -> Result<Var> {
    let labels = batch.to_time_major(&batch.labels);
    let mask = batch.to_time_major(&batch.mask);
    let num_labels = tape.value(logits).cols();
    let weights: Vec<f64> = (0..labels.len())
        .map(|i| {
            let row = i % batch.size;
            if mask[i] {
                1.0 / (batch.lengths[row] as f64 * batch.size as f64)
            } else {
                0.0
            }
        })
        .collect();
    if let Some(i) = (0..labels.len()).find(|&i| mask[i] && labels[i] >= num_labels) {
        return Err(Error::Data(format!(
            "utterance {}: gold label id {} ≥ {num_labels}",
            batch.origin[i % batch.size],
            labels[i]
        )));
    }
    tape.cross_entropy(logits, &labels, &weights)
}

/// Attention weights over real steps and the pooled vector `c = Σ α_t h_t`.
pub fn attention_pool(
    tape: &mut Tape,
    h: Var,
    mask: &Rc<Vec<bool>>,
    batch: usize,
    score_w: Var,
    score_b: Var,
) -> Result<(Var, Var)> {
    let e = tape.matmul(h, score_w)?;
    let e = tape.add_row(e, score_b)?;
    let alpha = tape.time_softmax(e, mask.clone(), batch)?;
    let c = tape.time_pool(alpha, h, mask.clone(), batch)?;
    Ok((alpha, c))
}

/// Mean of `−log P(d*)` over the batch.
pub fn domain_loss(tape: &mut Tape, logits: Var, domains: &[usize]) -> Result<Var> {
    let n = tape.value(logits).cols();
    if let Some(&d) = domains.iter().find(|&&d| d >= n) {
        return Err(Error::Data(format!("domain id {d} out of range for {n} domains")));
    }
    let w = vec![1.0 / domains.len() as f64; domains.len()];
    tape.cross_entropy(logits, domains, &w)
}

/// Scalar values of the two losses and their combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_y: f64,
    pub l_d: f64,
    pub total: f64,
}

/// `total = l_y + λ·l_d` on the tape.
pub fn total_loss(tape: &mut Tape, l_y: Var, l_d: Option<Var>, lambda: f64) -> Result<(Var, LossBundle)> {
    let ly = tape.value(l_y).item();
    match l_d {
        Some(l_d) => {
            let ld = tape.value(l_d).item();
            let scaled = tape.scale(l_d, lambda);
            let total = tape.add(l_y, scaled)?;
            let t = tape.value(total).item();
            Ok((
                total,
                LossBundle {
                    l_y: ly,
                    l_d: ld,
                    total: t,
                },
            ))
        }
        None => Ok((
            l_y,
            LossBundle {
                l_y: ly,
                l_d: 0.0,
                total: ly,
            },
        )),
    }
}

/// Everything one forward pass leaves on the tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub states: EncoderStates,
    pub slot_logits: Var,
    pub l_y: Var,
    pub domain_logits: Option<Var>,
    pub attention: Option<Var>,
    pub l_d: Option<Var>,
    pub total: Var,
    pub losses: LossBundle,
}

/// Bi-LSTM tagger. Parameters `embedding`, `fwd.*`, `bwd.*` form the
/// encoder; `slot.*` the label head; `dom.*` (adversarial models only) the
/// attention scorer and domain head.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SlotModel {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = Self::init_encoder(&config, rng);
        let (s, m) = (config.state_dim(), config.mlp_hidden_dim);
        init_mlp(&mut params, "slot", s, m, config.num_slot_labels, rng);
        if config.adversarial() {
            params.insert("dom.score_w", Tensor::glorot(s, 1, rng));
            params.insert("dom.score_b", bias(1));
            init_mlp(&mut params, "dom", s, m, config.num_domains, rng);
        }
        Ok(SlotModel { config, params })
    }

    fn init_encoder(config: &ModelConfig, rng: &mut RngState) -> ParamStore {
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        let mut p = ParamStore::new();
        p.insert("embedding", Tensor::glorot(config.vocab_size, e, rng));
        for dir in ["fwd", "bwd"] {
            p.insert(format!("{dir}.w_x"), Tensor::glorot(e, 4 * h, rng));
            p.insert(format!("{dir}.w_h"), Tensor::glorot(h, 4 * h, rng));
            let mut b = bias(4 * h);
            b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            p.insert(format!("{dir}.bias"), b);
        }
        p
    }

    pub fn has_domain_head(&self) -> bool {
        self.params.get("dom.score_w").is_some()
    }

    /// Only the encoder parameters (`embedding`, `fwd.*`, `bwd.*`).
    pub fn encoder_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, t) in self.params.iter() {
            if n == "embedding" || n.starts_with("fwd.") || n.starts_with("bwd.") {
                p.insert(n, t.clone());
            }
        }
        p
    }

    /// Full forward pass with both losses. With `reverse == false` the domain
    /// branch sees the encoder states directly; training always reverses.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        mode: Mode,
        rng: &mut RngState,
        reverse: bool,
    ) -> Result<Forward> {
        let enc = EncoderVars::from_bound(bound)?;
        let states = encode(tape, &enc, batch, mode, self.config.dropout_rate, rng)?;
        let slot = HeadVars::from_bound(bound, "slot")?;
        let slot_logits = mlp(tape, &slot, states.h)?;
        let l_y = slot_loss(tape, slot_logits, batch)?;

        let (mut domain_logits, mut attention, mut l_d) = (None, None, None);
        if self.has_domain_head() {
            let dom = DomainVars::from_bound(bound)?;
            let h = if reverse { tape.grad_reverse(states.h) } else { states.h };
            let (alpha, c) = attention_pool(tape, h, &states.mask, states.batch, dom.score_w, dom.score_b)?;
            let logits = mlp(tape, &dom.head, c)?;
            l_d = Some(domain_loss(tape, logits, &batch.domains)?);
            domain_logits = Some(logits);
            attention = Some(alpha);
        }
        let (total, losses) = total_loss(tape, l_y, l_d, self.config.lambda_adv)?;
        Ok(Forward {
            states,
            slot_logits,
            l_y,
            domain_logits,
            attention,
            l_d,
            total,
            losses,
        })
    }

    /// Per-step slot-label distributions `P(y_t | w)`, `[T_max·B, L]`
    /// time-major.
    pub fn slot_distribution(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let enc = EncoderVars::from_bound(&bound)?;
        let mut rng = RngState::new(0);
        let states = encode(&mut tape, &enc, batch, Mode::Eval, 0.0, &mut rng)?;
        let slot = HeadVars::from_bound(&bound, "slot")?;
        let logits = mlp(&mut tape, &slot, states.h)?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).clone())
    }

    /// Domain distribution `P(d | w)`, `[B, D]`; `None` without a domain head.
    pub fn domain_distribution(&self, batch: &Batch) -> Result<Option<Tensor>> {
        if !self.has_domain_head() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let f = self.forward(&mut tape, &bound, batch, Mode::Eval, &mut RngState::new(0), true)?;
        let p = tape.softmax(f.domain_logits.expect("domain head"));
        Ok(Some(tape.value(p).clone()))
    }

    /// Arg-max label ids for every real token, one vector per utterance.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        let p = self.slot_distribution(batch)?;
        Ok(decode(&p, batch))
    }

    /// Eval-mode encoder states per utterance, `[len, 2H]` each.
    pub fn encoder_states(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let enc = EncoderVars::from_bound(&bound)?;
        let states = encode(&mut tape, &enc, batch, Mode::Eval, 0.0, &mut RngState::new(0))?;
        Ok(split_states(tape.value(states.h), batch))
    }
}

/// Per-utterance rows of a time-major `[T_max·B, D]` tensor.
pub(crate) fn split_states(h: &Tensor, batch: &Batch) -> Vec<Tensor> {
    let d = h.cols();
    (0..batch.size)
        .map(|b| {
            let n = batch.lengths[b];
            let mut data = Vec::with_capacity(n * d);
            for t in 0..n {
                data.extend_from_slice(h.row(t * batch.size + b));
            }
            Tensor::new(vec![n, d], data).expect("state shape")
        })
        .collect()
}

/// Arg-max decoding of time-major distributions.
pub(crate) fn decode(p: &Tensor, batch: &Batch) -> Vec<Vec<usize>> {
    (0..batch.size)
        .map(|b| {
            (0..batch.lengths[b])
                .map(|t| argmax(p.row(batch.time_major(b, t))))
                .collect()
        })
        .collect()
}
