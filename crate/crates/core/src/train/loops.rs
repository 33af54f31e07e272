use std::collections::BTreeSet;
use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::data::{encode_all, make_batches, Batch, BatchOptions, Encoded, IdMap, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::chunk_counts;
use crate::model::{
    slot_loss, stack_states, total_loss, Bound, Checkpoint, JointModel, LossBundle, Mode, ModelConfig, ModelKind,
    ParamStore, SlotModel, StoredModel,
};
use crate::tensor::{RngState, Tensor};

use super::optim::{check_finite, clip_gradients, global_norm, AdamState};
use super::{split_dev, EpochRecord, ModelDims, Stream, TrainConfig};

const EVAL_BATCH: usize = 64;

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev F1.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    /// Losses of the very first update, before any parameter changed.
    pub first_batch: Option<LossBundle>,
    /// Names of the parameters the optimizer tracked.
    pub optimized: Vec<String>,
    pub steps: usize,
}

/// The per-batch training batches of one epoch, drawn from `rng`.
pub fn epoch_batches(train: &[Encoded], cfg: &TrainConfig, unk: bool, rng: &mut RngState) -> Result<Vec<Batch>> {
    make_batches(
        train,
        BatchOptions {
            batch_size: cfg.batch_size,
            shuffle: true,
            singleton_unk: unk.then_some(cfg.singleton_unk),
        },
        rng,
    )
}

pub(crate) fn eval_batches(corpus: &[Encoded]) -> Result<Vec<Batch>> {
    make_batches(
        corpus,
        BatchOptions {
            batch_size: EVAL_BATCH,
            shuffle: false,
            singleton_unk: None,
        },
        &mut RngState::new(0),
    )
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Dev,
}

/// What differs between the regimes: which parameters train, how a batch
/// loss is built, and how dev predictions are made.
trait Regime {
    fn trainable(&self) -> &ParamStore;
    fn trainable_mut(&mut self) -> &mut ParamStore;
    fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        rng: &mut RngState,
    ) -> Result<(Var, LossBundle, bool)>;
    fn distribution(&self, batch: &Batch, split: Split) -> Result<Tensor>;
}

struct SlotRegime(SlotModel);

impl Regime for SlotRegime {
    fn trainable(&self) -> &ParamStore {
        &self.0.params
    }

    fn trainable_mut(&mut self) -> &mut ParamStore {
        &mut self.0.params
    }

    fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        rng: &mut RngState,
    ) -> Result<(Var, LossBundle, bool)> {
        let f = self.0.forward(tape, bound, batch, Mode::Train, rng, true)?;
        Ok((f.total, f.losses, f.l_d.is_some()))
    }

    fn distribution(&self, batch: &Batch, _: Split) -> Result<Tensor> {
        self.0.slot_distribution(batch)
    }
}

/// Joint output layer over encoder states cached once per utterance.
struct JointRegime {
    model: JointModel,
    train_states: Vec<Tensor>,
    dev_states: Vec<Tensor>,
}

impl JointRegime {
    fn states(&self, tape: &mut Tape, batch: &Batch, split: Split) -> Var {
        let cache = match split {
            Split::Train => &self.train_states,
            Split::Dev => &self.dev_states,
        };
        let rows: Vec<&Tensor> = batch.origin.iter().map(|&i| &cache[i]).collect();
        tape.constant(stack_states(&rows, batch.t_max))
    }
}

impl Regime for JointRegime {
    fn trainable(&self) -> &ParamStore {
        &self.model.output
    }

    fn trainable_mut(&mut self) -> &mut ParamStore {
        &mut self.model.output
    }

    fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        rng: &mut RngState,
    ) -> Result<(Var, LossBundle, bool)> {
        let h = self.states(tape, batch, Split::Train);
        let logits = self.model.head_logits(tape, bound, h, Mode::Train, rng)?;
        let l_y = slot_loss(tape, logits, batch)?;
        let (total, losses) = total_loss(tape, l_y, None, 0.0)?;
        Ok((total, losses, false))
    }

    fn distribution(&self, batch: &Batch, split: Split) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.model.output.bind(&mut tape, false);
        let h = self.states(&mut tape, batch, split);
        let logits = self
            .model
            .head_logits(&mut tape, &out, h, Mode::Eval, &mut RngState::new(0))?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).clone())
    }
}

struct Fit {
    best: ParamStore,
    best_epoch: usize,
    best_f1: f64,
    history: Vec<EpochRecord>,
    first_batch: Option<LossBundle>,
    optimized: Vec<String>,
    steps: usize,
}

/// Eval-mode F1 and mean utterance slot loss on one split.
fn split_scores<R: Regime>(regime: &R, batches: &[Batch], labels: &IdMap, split: Split) -> Result<(f64, f64)> {
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    let mut n = 0usize;
    for batch in batches {
        let p = regime.distribution(batch, split)?;
        for b in 0..batch.size {
            let len = batch.lengths[b];
            let (mut g, mut q) = (Vec::with_capacity(len), Vec::with_capacity(len));
            let mut nll = 0.0;
            for t in 0..len {
                let row = p.row(batch.time_major(b, t));
                let y = batch.labels[b * batch.t_max + t];
                nll -= row[y].max(f64::MIN_POSITIVE).ln();
                g.push(labels.name(y).to_string());
                q.push(labels.name(crate::model::argmax(row)).to_string());
            }
            loss += nll / len as f64;
            n += 1;
            gold.push(g);
            pred.push(q);
        }
    }
    let f1 = chunk_counts(&gold, &pred)?.f1();
    Ok((f1, if n == 0 { 0.0 } else { loss / n as f64 }))
}

fn fit<R: Regime>(
    regime: &mut R,
    train: &[Encoded],
    dev: &[Encoded],
    labels: &IdMap,
    unk: bool,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Fit> {
    let start = Instant::now();
    let mut batch_rng = cfg.rng(Stream::Batches);
    let mut drop_rng = cfg.rng(Stream::Dropout);
    let dev_batches = eval_batches(dev)?;
    let train_eval = eval_batches(train)?;
    let mut adam = AdamState::new(regime.trainable(), cfg);
    let mut fit = Fit {
        best: regime.trainable().clone(),
        best_epoch: 0,
        best_f1: f64::NEG_INFINITY,
        history: Vec::new(),
        first_batch: None,
        optimized: adam.names.clone(),
        steps: 0,
    };
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(train, cfg, unk, &mut batch_rng)?;
        let (mut sum_y, mut sum_d, mut has_d, mut max_norm) = (0.0, 0.0, false, 0.0f64);
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = regime.trainable().bind(&mut tape, true);
            let (loss, losses, with_d) = regime.loss(&mut tape, &bound, batch, &mut drop_rng)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFinite {
                    batch: fit.steps,
                    param: "loss".into(),
                });
            }
            fit.first_batch.get_or_insert(losses);
            tape.backward(loss)?;
            let mut grads = bound.grads(&tape);
            check_finite(&grads, regime.trainable(), fit.steps)?;
            clip_gradients(&mut grads, cfg.clip_norm);
            max_norm = max_norm.max(global_norm(&grads));
            adam.step(regime.trainable_mut(), &grads)?;
            fit.steps += 1;
            sum_y += losses.l_y;
            sum_d += losses.l_d;
            has_d |= with_d;
        }
        let n = batches.len().max(1) as f64;
        let (train_f1, _) = split_scores(regime, &train_eval, labels, Split::Train)?;
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            l_y: sum_y / n,
            l_d: has_d.then_some(sum_d / n),
            f1: Some(train_f1),
            probe_acc: None,
            grad_norm: Some(max_norm),
            wall_clock: start.elapsed().as_secs_f64(),
        };
        log(&rec)?;
        fit.history.push(rec);

        let (f1, dev_loss) = split_scores(regime, &dev_batches, labels, Split::Dev)?;
        let rec = EpochRecord {
            epoch,
            split: "dev".into(),
            l_y: dev_loss,
            l_d: None,
            f1: Some(f1),
            probe_acc: None,
            grad_norm: None,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        log(&rec)?;
        fit.history.push(rec);

        // Ties move the checkpoint forward but do not reset patience.
        if f1 > fit.best_f1 {
            stale = 0;
        } else {
            stale += 1;
        }
        if f1 >= fit.best_f1 {
            fit.best_f1 = f1;
            fit.best_epoch = epoch;
            fit.best = regime.trainable().clone();
        }
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(fit)
}

fn domain_count(corpus: &[Utterance]) -> usize {
    corpus.iter().map(|u| u.domain.as_str()).collect::<BTreeSet<_>>().len()
}

struct Prepared {
    vocab: Vocabulary,
    train: Vec<Encoded>,
    dev: Vec<Encoded>,
}

/// Carves the dev split and builds the vocabulary: words from the training
/// part (or `words`), labels and domains from everything.
fn prepare(corpus: &[Utterance], cfg: &TrainConfig, words: Option<&IdMap>) -> Result<Prepared> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let (train_idx, dev_idx) = split_dev(corpus, cfg.dev_fraction, &mut cfg.rng(Stream::DevSplit));
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    let (train, dev) = (pick(&train_idx), pick(&dev_idx));
    let vocab = match words {
        Some(w) => Vocabulary::with_words(w, corpus)?,
        None => Vocabulary::build_split(&train, corpus)?,
    };
    Ok(Prepared {
        train: encode_all(&train, &vocab)?,
        dev: encode_all(&dev, &vocab)?,
        vocab,
    })
}

fn model_config(dims: &ModelDims, vocab: &Vocabulary, cfg: &TrainConfig, lambda: f64) -> ModelConfig {
    ModelConfig {
        embedding_dim: dims.embedding_dim,
        hidden_dim: dims.hidden_dim,
        mlp_hidden_dim: dims.mlp_hidden_dim,
        dropout_rate: cfg.dropout,
        vocab_size: vocab.words.len(),
        num_slot_labels: vocab.labels.len(),
        num_domains: vocab.domains.len(),
        lambda_adv: lambda,
    }
}

fn outcome(fit: Fit, kind: ModelKind, vocab: Vocabulary, model: StoredModel) -> TrainOutcome {
    TrainOutcome {
        checkpoint: Checkpoint { kind, vocab, model },
        history: fit.history,
        best_epoch: fit.best_epoch,
        best_dev_f1: fit.best_f1,
        first_batch: fit.first_batch,
        optimized: fit.optimized,
        steps: fit.steps,
    }
}

fn train_slot(
    corpus: &[Utterance],
    dims: &ModelDims,
    cfg: &TrainConfig,
    words: Option<&IdMap>,
    lambda: f64,
    kind: ModelKind,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let p = prepare(corpus, cfg, words)?;
    let config = model_config(dims, &p.vocab, cfg, lambda);
    let mut regime = SlotRegime(SlotModel::new(config, &mut cfg.rng(Stream::Init))?);
    let fit = fit(&mut regime, &p.train, &p.dev, &p.vocab.labels, true, cfg, log)?;
    let model = SlotModel {
        config: regime.0.config,
        params: fit.best.clone(),
    };
    Ok(outcome(fit, kind, p.vocab, StoredModel::Slot(model)))
}

/// Domain-specific tagger on one domain's corpus, slot loss only. With
/// `words` the word table is taken from another model (needed to pair it
/// with a general encoder later).
pub fn train_specific(
    corpus: &[Utterance],
    dims: &ModelDims,
    cfg: &TrainConfig,
    words: Option<&IdMap>,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if domain_count(corpus) > 1 {
        return Err(Error::Config(format!(
            "domain-specific training expects one domain, got {}",
            domain_count(corpus)
        )));
    }
    train_slot(corpus, dims, cfg, words, 0.0, ModelKind::Specific, log)
}

/// Tagger on the union of all domains with the combined label set; with
/// `lambda_adv > 0` the adversarial domain branch is added.
pub fn train_general(
    corpus: &[Utterance],
    dims: &ModelDims,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let adv = cfg.lambda_adv > 0.0;
    if adv && domain_count(corpus) < 2 {
        return Err(Error::Config("adversary requires ≥ 2 domains".into()));
    }
    let kind = if adv { ModelKind::GeneralAdv } else { ModelKind::General };
    train_slot(corpus, dims, cfg, None, cfg.lambda_adv, kind, log)
}

/// Frozen encoder states for every utterance, in corpus order.
fn cache_states(model: &JointModel, corpus: &[Encoded]) -> Result<Vec<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; corpus.len()];
    for batch in eval_batches(corpus)? {
        for (s, &i) in model.encoder_states(&batch)?.into_iter().zip(&batch.origin) {
            out[i] = Some(s);
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every utterance batched")).collect())
}

/// Output MLP over the frozen encoders of `specific` and `general`, trained
/// on one domain's corpus with that domain's label set.
pub fn train_joint(
    specific: &Checkpoint,
    general: &Checkpoint,
    corpus: &[Utterance],
    mlp_hidden_dim: usize,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (Some(spec), Some(gen)) = (specific.slot_model(), general.slot_model()) else {
        return Err(Error::Config("joint training needs two tagger checkpoints".into()));
    };
    if specific.vocab.words != general.vocab.words {
        return Err(Error::Config(
            "encoder checkpoints use different word vocabularies".into(),
        ));
    }
    if domain_count(corpus) > 1 {
        return Err(Error::Config("joint training expects one domain".into()));
    }
    let p = prepare(corpus, cfg, Some(&specific.vocab.words))?;
    let vocab = specific.vocab.clone();
    for u in corpus {
        if let Some(l) = u.labels.iter().find(|l| vocab.labels.id(l).is_none()) {
            return Err(Error::Data(format!(
                "label {l:?} is not in the domain-specific label set"
            )));
        }
    }
    let train = encode_all_with(&p.train, &p.vocab, &vocab);
    let dev = encode_all_with(&p.dev, &p.vocab, &vocab);

    let model = JointModel::new(
        spec,
        gen,
        vocab.labels.len(),
        mlp_hidden_dim,
        cfg.dropout,
        &mut cfg.rng(Stream::Init),
    )?;
    let mut regime = JointRegime {
        train_states: cache_states(&model, &train)?,
        dev_states: cache_states(&model, &dev)?,
        model,
    };
    let fit = fit(&mut regime, &train, &dev, &vocab.labels, false, cfg, log)?;
    let mut model = regime.model;
    model.output = fit.best.clone();
    Ok(outcome(fit, ModelKind::Joint, vocab, StoredModel::Joint(model)))
}

/// Re-maps label ids from one table to another with the same names.
fn encode_all_with(items: &[Encoded], from: &Vocabulary, to: &Vocabulary) -> Vec<Encoded> {
    items
        .iter()
        .map(|e| Encoded {
            words: e.words.clone(),
            labels: e
                .labels
                .iter()
                .map(|&l| to.labels.id(from.labels.name(l)).expect("checked label"))
                .collect(),
            domain: e.domain,
        })
        .collect()
}
