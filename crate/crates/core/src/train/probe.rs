use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, Encoded, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{argmax, attention_pool, domain_loss, stack_states, Bound, ParamStore, SlotModel};
use crate::tensor::Tensor;

use super::loops::{epoch_batches, eval_batches};
use super::optim::{clip_gradients, AdamState};
use super::{split_dev, Stream, TrainConfig};

const PROBE_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Test accuracy in percent.
    pub accuracy: f64,
    pub dev_accuracy: f64,
    pub epochs: usize,
    pub domains: Vec<String>,
}

struct Cached {
    items: Vec<Encoded>,
    states: Vec<Tensor>,
}

fn cache(encoder: &SlotModel, vocab: &Vocabulary, corpus: &[Utterance], domains: &[String]) -> Result<Cached> {
    let items = corpus
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let domain = domains
                .iter()
                .position(|d| *d == u.domain)
                .ok_or_else(|| Error::Data(format!("utterance {i}: domain {:?} unseen by the probe", u.domain)))?;
            Ok(Encoded {
                words: u.tokens.iter().map(|t| vocab.word_id(t)).collect(),
                labels: vec![0; u.len()],
                domain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states: Vec<Option<Tensor>> = vec![None; items.len()];
    for batch in eval_batches(&items)? {
        for (s, &i) in encoder.encoder_states(&batch)?.into_iter().zip(&batch.origin) {
            states[i] = Some(s);
        }
    }
    Ok(Cached {
        items,
        states: states.into_iter().map(|s| s.expect("batched")).collect(),
    })
}

fn logits(tape: &mut Tape, p: &Bound, cached: &Cached, batch: &Batch) -> Result<Var> {
    let rows: Vec<&Tensor> = batch.origin.iter().map(|&i| &cached.states[i]).collect();
    let h = tape.constant(stack_states(&rows, batch.t_max));
    let mask = Rc::new(batch.to_time_major(&batch.mask));
    let (_, c) = attention_pool(tape, h, &mask, batch.size, p.var("score_w")?, p.var("score_b")?)?;
    let z = tape.matmul(c, p.var("w")?)?;
    tape.add_row(z, p.var("b")?)
}

fn accuracy(params: &ParamStore, cached: &Cached) -> Result<f64> {
    if cached.items.is_empty() {
        return Ok(0.0);
    }
    let mut right = 0;
    for batch in eval_batches(&cached.items)? {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let z = logits(&mut tape, &p, cached, &batch)?;
        let z = tape.value(z);
        right += (0..batch.size)
            .filter(|&b| argmax(z.row(b)) == batch.domains[b])
            .count();
    }
    Ok(100.0 * right as f64 / cached.items.len() as f64)
}

/// Trains a fresh attention-pooling linear domain classifier on the frozen
/// encoder states of `encoder` and reports its accuracy on `test`. The
/// classifier sees no dropout.
pub fn probe_domain_accuracy(
    encoder: &SlotModel,
    vocab: &Vocabulary,
    train: &[Utterance],
    test: &[Utterance],
    cfg: &TrainConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let mut domains: Vec<String> = Vec::new();
    for u in train {
        if !domains.contains(&u.domain) {
            domains.push(u.domain.clone());
        }
    }
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "the domain probe needs ≥ 2 domains, got {}",
            domains.len()
        )));
    }
    let mut rng = cfg.rng(Stream::Probe);
    let (train_idx, dev_idx) = split_dev(train, cfg.dev_fraction, &mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| train[i].clone()).collect::<Vec<_>>();
    let fit_set = cache(encoder, vocab, &pick(&train_idx), &domains)?;
    let dev_set = cache(encoder, vocab, &pick(&dev_idx), &domains)?;
    let test_set = cache(encoder, vocab, test, &domains)?;

    let width = encoder.config.state_dim();
    let mut params = ParamStore::new();
    params.insert("score_w", Tensor::glorot(width, 1, &mut rng));
    params.insert("score_b", Tensor::zeros(&[1]));
    params.insert("w", Tensor::glorot(width, domains.len(), &mut rng));
    params.insert("b", Tensor::zeros(&[domains.len()]));

    let mut adam = AdamState::new(&params, cfg);
    let mut best = (f64::NEG_INFINITY, params.clone(), 0);
    let mut stale = 0;
    for epoch in 1..=PROBE_EPOCHS {
        for batch in epoch_batches(&fit_set.items, cfg, false, &mut rng)? {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let z = logits(&mut tape, &p, &fit_set, &batch)?;
            let loss = domain_loss(&mut tape, z, &batch.domains)?;
            tape.backward(loss)?;
            let mut grads = p.grads(&tape);
            clip_gradients(&mut grads, cfg.clip_norm);
            adam.step(&mut params, &grads)?;
        }
        let acc = accuracy(&params, &dev_set)?;
        if acc > best.0 {
            best = (acc, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(ProbeReport {
        accuracy: accuracy(&best.1, &test_set)?,
        dev_accuracy: best.0,
        epochs: best.2,
        domains,
    })
}
