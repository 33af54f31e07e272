//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNMET` are reported but do not fail the
//! target; every other criterion must pass. A listed criterion that starts
//! passing also fails the target, so the list cannot go stale.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use slotfill::autodiff::{lstm_cell, LstmParams, Tape, Var};
use slotfill::data::{Batch, Encoded, Utterance};
use slotfill::eval::evaluate;
use slotfill::gradcheck::{central_difference, max_relative_error};
use slotfill::metrics::chunk_f1;
use slotfill::model::{Mode, ModelConfig, ParamStore, SlotModel};
use slotfill::synth::{generate, standard_suite, suite_specs, SuiteDomain};
use slotfill::train::{
    probe_domain_accuracy, train_general, train_joint, train_specific, EpochRecord, ModelDims, TrainConfig,
};
use slotfill::{RngState, Tensor};
use tempfile::TempDir;

/// Criteria that the current implementation does not meet.
const KNOWN_UNMET: &[u32] = &[6, 7];

const SUITE_SEED: u64 = 1;
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn quiet() -> impl FnMut(&EpochRecord) -> slotfill::Result<()> {
    |_| Ok(())
}

fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Largest relative error between tape gradients and central differences of
/// `sum(build(inputs) ⊙ w)` for a fixed random `w`.
fn fd_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        random_tensor(tape.value(out).shape(), &mut RngState::new(77))
    };
    let run = |xs: &[Tensor], backward: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = if backward {
            tape.backward(loss).unwrap();
            vars.iter().map(|&v| tape.grad(v)).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let analytic = run(inputs, true).1;
    let numeric = central_difference(|xs| run(xs, false).0, inputs, FD_STEP);
    max_relative_error(&analytic, &numeric, FD_FLOOR)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn primitive_cases(rng: &mut RngState) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let mut r = |shape: &[usize]| random_tensor(shape, rng);
    let mask = Rc::new(vec![true, true, true, false, true, false]);
    let (m1, m2, m3) = (mask.clone(), mask.clone(), mask.clone());
    vec![
        (
            "matmul",
            vec![r(&[3, 4]), r(&[4, 2])],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "add",
            vec![r(&[3, 2]), r(&[3, 2])],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![r(&[3, 2]), r(&[3, 2])],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![r(&[3, 2]), r(&[3, 2])],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![r(&[3, 4]), r(&[4])],
            Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
        ),
        ("scale", vec![r(&[2, 3])], Box::new(|t, v| t.scale(v[0], -0.7))),
        (
            "mul_const",
            vec![r(&[2, 3])],
            Box::new(|t, v| t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.5]).unwrap()),
        ),
        (
            "concat_cols",
            vec![r(&[3, 2]), r(&[3, 3])],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        (
            "slice_cols",
            vec![r(&[3, 5])],
            Box::new(|t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        ),
        (
            "slice_rows",
            vec![r(&[4, 2])],
            Box::new(|t, v| t.slice_rows(v[0], 1, 2).unwrap()),
        ),
        (
            "concat_rows",
            vec![r(&[2, 3]), r(&[1, 3])],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        (
            "embedding",
            vec![r(&[6, 3])],
            Box::new(|t, v| t.embedding(v[0], &[0, 2, 2, 5]).unwrap()),
        ),
        (
            "select_rows",
            vec![r(&[6, 2]), r(&[6, 2])],
            Box::new(move |t, v| t.select_rows(m1.clone(), v[0], v[1]).unwrap()),
        ),
        ("sum", vec![r(&[2, 3])], Box::new(|t, v| t.sum(v[0]))),
        ("sigmoid", vec![r(&[2, 3])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("tanh", vec![r(&[2, 3])], Box::new(|t, v| t.tanh(v[0]))),
        ("softmax", vec![r(&[3, 4])], Box::new(|t, v| t.softmax(v[0]))),
        (
            "dropout",
            vec![r(&[4, 5])],
            Box::new(|t, v| t.dropout(v[0], 0.4, true, &mut RngState::new(3)).unwrap()),
        ),
        (
            "cross_entropy",
            vec![r(&[4, 5])],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], &[1.0, 0.5, 0.0, 2.0]).unwrap()),
        ),
        (
            "time_softmax",
            vec![r(&[6, 1])],
            Box::new(move |t, v| t.time_softmax(v[0], m2.clone(), 2).unwrap()),
        ),
        (
            "time_pool",
            vec![r(&[6, 1]), r(&[6, 3])],
            Box::new(move |t, v| t.time_pool(v[0], v[1], m3.clone(), 2).unwrap()),
        ),
        (
            "lstm_cell",
            vec![r(&[2, 12]), r(&[3, 12]), r(&[12]), r(&[1, 2]), r(&[1, 3]), r(&[1, 3])],
            Box::new(|t, v| {
                let p = LstmParams {
                    w_x: v[0],
                    w_h: v[1],
                    bias: v[2],
                };
                let (h, c) = lstm_cell(t, v[3], v[4], v[5], &p).unwrap();
                t.concat_cols(&[h, c]).unwrap()
            }),
        ),
    ]
}

fn random_batch(lengths: &[usize], vocab: usize, labels: usize, domains: usize, rng: &mut RngState) -> Batch {
    let items: Vec<Encoded> = lengths
        .iter()
        .map(|&n| Encoded {
            words: (0..n).map(|_| 2 + rng.below(vocab - 2)).collect(),
            labels: (0..n).map(|_| rng.below(labels)).collect(),
            domain: rng.below(domains),
        })
        .collect();
    let rows: Vec<(usize, &Encoded)> = items.iter().enumerate().collect();
    Batch::from_encoded(&rows)
}

fn tiny_config(lambda: f64) -> ModelConfig {
    ModelConfig {
        embedding_dim: 5,
        hidden_dim: 8,
        mlp_hidden_dim: 6,
        dropout_rate: 0.0,
        vocab_size: 20,
        num_slot_labels: 5,
        num_domains: 3,
        lambda_adv: lambda,
    }
}

fn is_domain_param(name: &str) -> bool {
    name.starts_with("dom.")
}

fn with_params(m: &SlotModel, names: &[String], xs: &[Tensor]) -> SlotModel {
    let mut p = ParamStore::new();
    for (n, t) in names.iter().zip(xs) {
        p.insert(n.clone(), t.clone());
    }
    SlotModel {
        config: m.config.clone(),
        params: p,
    }
}

/// Gradients of one selected loss of the forward pass.
fn loss_grads(m: &SlotModel, batch: &Batch, reverse: bool, pick: Pick) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, true);
    let f = m
        .forward(&mut tape, &b, batch, Mode::Eval, &mut RngState::new(0), reverse)
        .unwrap();
    let loss = match pick {
        Pick::Total => f.total,
        Pick::Slot => f.l_y,
        Pick::Domain => f.l_d.unwrap(),
    };
    tape.backward(loss).unwrap();
    b.grads(&tape)
}

#[derive(Clone, Copy)]
enum Pick {
    Total,
    Slot,
    Domain,
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(2024);
    let mut worst = (0.0f64, "");
    for (name, inputs, build) in primitive_cases(&mut rng) {
        let e = fd_error(&inputs, &*build);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    // reversal: identity forward, negated backward
    let x = random_tensor(&[3, 2], &mut rng);
    let rev = {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let r = tape.grad_reverse(v);
        let s = tape.scale(r, 1.5);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        tape.grad(v)
    };
    let plain = central_difference(|xs| 1.5 * xs[0].data().iter().sum::<f64>(), &[x], FD_STEP);
    let negated = Tensor::new(rev.shape().to_vec(), rev.data().iter().map(|g| -g).collect()).unwrap();
    let e = max_relative_error(&[negated], &plain, FD_FLOOR);
    if e > worst.0 {
        worst = (e, "grad_reverse");
    }

    let mut model_worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = RngState::new(500 + seed);
        let lambda = [0.01, 0.1, 1.0][rng.below(3)];
        let m = SlotModel::new(tiny_config(lambda), &mut rng).unwrap();
        let lengths: Vec<usize> = (0..2 + rng.below(3)).map(|_| 1 + rng.below(6)).collect();
        let batch = random_batch(&lengths, 20, 5, 3, &mut rng);
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        // The reversed objective has the encoder gradient of l_y − λ·l_d
        // and the domain-head gradient of l_y + λ·l_d.
        let objective = |sign: f64| {
            let (names, batch, m) = (&names, &batch, &m);
            move |xs: &[Tensor]| {
                let mm = with_params(m, names, xs);
                let mut tape = Tape::new();
                let b = mm.params.bind(&mut tape, true);
                let f = mm
                    .forward(&mut tape, &b, batch, Mode::Eval, &mut RngState::new(0), false)
                    .unwrap();
                f.losses.l_y + sign * lambda * f.losses.l_d
            }
        };
        let analytic = loss_grads(&m, &batch, true, Pick::Total);
        let enc = central_difference(objective(-1.0), &inputs, FD_STEP);
        let head = central_difference(objective(1.0), &inputs, FD_STEP);
        for (k, name) in names.iter().enumerate() {
            let numeric = if is_domain_param(name) { &head[k] } else { &enc[k] };
            let e = max_relative_error(&analytic[k..=k], std::slice::from_ref(numeric), FD_FLOOR);
            model_worst = model_worst.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < FD_TOL && model_worst < FD_TOL && secs < 60.0,
        format!(
            "primitives max rel err {:.2e} ({}), full models {:.2e}, {:.1}s",
            worst.0, worst.1, model_worst, secs
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = RngState::new(31);
    let batch = random_batch(&[5, 3, 4], 20, 5, 3, &mut rng);
    let mut worst = 0.0f64;
    for lambda in [0.01, 0.1, 1.0] {
        let m = SlotModel::new(tiny_config(lambda), &mut RngState::new(32)).unwrap();
        let total = loss_grads(&m, &batch, true, Pick::Total);
        let slot = loss_grads(&m, &batch, true, Pick::Slot);
        let plain_d = loss_grads(&m, &batch, false, Pick::Domain);
        for (k, (name, _)) in m.params.iter().enumerate() {
            let sign = if is_domain_param(name) { 1.0 } else { -1.0 };
            for i in 0..total[k].len() {
                let branch = total[k].data()[i] - slot[k].data()[i];
                worst = worst.max((branch - sign * lambda * plain_d[k].data()[i]).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |branch − (∓λ)·∇l_d| = {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let m = SlotModel::new(tiny_config(0.1), &mut RngState::new(41)).unwrap();
    let mut rng = RngState::new(42);
    let batch = random_batch(&[6, 2, 4, 1], 20, 5, 3, &mut rng);
    let loss = |b: &Batch| {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true);
        let f = m
            .forward(&mut tape, &bound, b, Mode::Eval, &mut RngState::new(0), true)
            .unwrap();
        f.losses
    };
    let reference = (loss(&batch), loss_grads(&m, &batch, true, Pick::Total));
    let mut mask_ok = true;
    for trial in 0..20 {
        let mut p = batch.clone();
        for i in 0..p.mask.len() {
            if !p.mask[i] {
                p.words[i] = 2 + (7 * trial + i) % 18;
                p.labels[i] = (trial + 3 * i) % 5;
            }
        }
        let l = loss(&p);
        mask_ok &= l.total.to_bits() == reference.0.total.to_bits()
            && l.l_y.to_bits() == reference.0.l_y.to_bits()
            && l.l_d.to_bits() == reference.0.l_d.to_bits()
            && loss_grads(&m, &p, true, Pick::Total) == reference.1;
    }

    let specs = suite_specs(0.5);
    let flights = generate(&specs[0], 200, &mut RngState::new(43)).unwrap();
    let mut both = flights.clone();
    both.extend(generate(&specs[1], 200, &mut RngState::new(44)).unwrap());
    let dims = ModelDims {
        embedding_dim: 8,
        hidden_dim: 8,
        mlp_hidden_dim: 8,
    };
    let short = TrainConfig {
        max_epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let gen = train_general(
        &both,
        &dims,
        &TrainConfig {
            lambda_adv: 0.01,
            ..short.clone()
        },
        &mut quiet(),
    )
    .unwrap();
    let spec = train_specific(&flights, &dims, &short, Some(&gen.checkpoint.vocab.words), &mut quiet()).unwrap();
    let long = TrainConfig {
        max_epochs: 10,
        patience: 10,
        ..short
    };
    let joint = train_joint(&spec.checkpoint, &gen.checkpoint, &flights, 8, &long, &mut quiet()).unwrap();
    let j = joint.checkpoint.joint_model().unwrap();
    let spec_hash = spec.checkpoint.slot_model().unwrap().encoder_params().digest();
    let gen_hash = gen.checkpoint.slot_model().unwrap().encoder_params().digest();
    let frozen = j.specific.digest() == spec_hash && j.general.digest() == gen_hash;
    let only_head = joint.optimized.iter().all(|n| n.starts_with("out."));
    outcome(
        mask_ok && frozen && only_head && joint.steps >= 100,
        format!(
            "padding perturbations bit-identical: {mask_ok}; encoder hashes unchanged after {} joint steps: {frozen}",
            joint.steps
        ),
    )
}

/// Chunk spans by direct enumeration: a chunk opens at `B-x`, or at `I-x`
/// not continuing an `x` chunk, and extends over following `I-x`.
fn oracle_chunks(labels: &[String]) -> HashSet<(usize, usize, String)> {
    let kind = |l: &str| l.get(2..).map(str::to_string);
    let mut out = HashSet::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == "O" {
            i += 1;
            continue;
        }
        let k = kind(&labels[i]).unwrap();
        let mut j = i + 1;
        while j < labels.len() && labels[j] == format!("I-{k}") {
            j += 1;
        }
        out.insert((i, j, k));
        i = j;
    }
    out
}

fn oracle_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> (f64, f64, f64) {
    let (mut c, mut g, mut p) = (0usize, 0usize, 0usize);
    for (gs, ps) in gold.iter().zip(pred) {
        let (a, b) = (oracle_chunks(gs), oracle_chunks(ps));
        c += a.intersection(&b).count();
        g += a.len();
        p += b.len();
    }
    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    let (pr, re) = (pct(c, p), pct(c, g));
    let f = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
    (pr, re, f)
}

fn criterion_4() -> Outcome {
    let tags = ["O", "B-a", "I-a", "B-b", "I-b", "B-c", "I-c"];
    let seq = |n: usize, rng: &mut RngState| -> Vec<String> {
        (0..n).map(|_| tags[rng.below(tags.len())].to_string()).collect()
    };
    let mut rng = RngState::new(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let lengths: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(12)).collect();
        let gold: Vec<Vec<String>> = lengths.iter().map(|&n| seq(n, &mut rng)).collect();
        let pred: Vec<Vec<String>> = lengths.iter().map(|&n| seq(n, &mut rng)).collect();
        let s = chunk_f1(&gold, &pred).unwrap();
        if (s.precision, s.recall, s.f1) != oracle_f1(&gold, &pred) {
            mismatches += 1;
        }
    }
    let v = |xs: &[&str]| vec![xs.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let hand = [
        (v(&["B-a", "I-a", "O", "B-b"]), v(&["B-a", "I-a", "O", "B-b"]), 100.0),
        (v(&["B-a", "I-a", "O", "B-b"]), v(&["O", "B-a", "O", "B-a"]), 0.0),
        (v(&["B-a", "I-a", "O", "B-b"]), v(&["B-a", "I-a", "O", "B-a"]), 50.0),
    ];
    let hand_ok = hand.iter().all(|(g, p, want)| chunk_f1(g, p).unwrap().f1 == *want);
    outcome(
        mismatches == 0 && hand_ok,
        format!("{mismatches}/1000 random pairs differ from the oracle; hand examples 100/0/50 reproduced: {hand_ok}"),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let corpus = generate(&suite_specs(0.5)[0], 50, &mut RngState::new(5)).unwrap();
    let cfg = TrainConfig {
        dropout: 0.0,
        singleton_unk: 0.0,
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 50,
        patience: 50,
        seed: 5,
        ..TrainConfig::default()
    };
    let dims = ModelDims {
        embedding_dim: 32,
        hidden_dim: 32,
        mlp_hidden_dim: 32,
    };
    let out = train_specific(&corpus, &dims, &cfg, None, &mut quiet()).unwrap();
    let reached = out
        .history
        .iter()
        .find(|r| r.split == "train" && r.f1 == Some(100.0))
        .map(|r| r.epoch);
    let secs = start.elapsed().as_secs_f64();
    let detail = match reached {
        Some(e) => format!("train F1 100.00 at epoch {e}, {secs:.1}s"),
        None => format!("train F1 never reached 100.00 in 50 epochs, {secs:.1}s"),
    };
    outcome(reached.is_some_and(|e| e <= 50) && secs < 120.0, detail)
}

struct SuiteRuns {
    general_f1: [f64; 3],
    probe: [f64; 2],
    secs_6: f64,
    /// Per domain: (name, specific F1, joint F1).
    joint: Vec<(String, f64, f64)>,
}

fn suite_runs(suite: &[SuiteDomain]) -> SuiteRuns {
    let start = Instant::now();
    let train: Vec<Utterance> = suite.iter().flat_map(|d| d.train.clone()).collect();
    let test: Vec<Utterance> = suite.iter().flat_map(|d| d.test.clone()).collect();
    let sets: Vec<(String, Vec<Utterance>)> = suite
        .iter()
        .map(|d| (d.spec.domain_name.clone(), d.test.clone()))
        .collect();
    let dims = ModelDims {
        embedding_dim: 64,
        hidden_dim: 64,
        mlp_hidden_dim: 64,
    };
    let cfg = |lambda: f64| TrainConfig {
        lambda_adv: lambda,
        seed: SUITE_SEED,
        ..TrainConfig::default()
    };
    let mut general_f1 = [0.0; 3];
    let mut probe = [0.0; 2];
    let mut models = Vec::new();
    for (k, lambda) in [0.0, 0.01, 1.0].into_iter().enumerate() {
        let out = train_general(&train, &dims, &cfg(lambda), &mut quiet()).unwrap();
        general_f1[k] = evaluate(&out.checkpoint, &sets).unwrap().combined().f1();
        if k < 2 {
            let ck = &out.checkpoint;
            probe[k] = probe_domain_accuracy(ck.slot_model().unwrap(), &ck.vocab, &train, &test, &cfg(lambda))
                .unwrap()
                .accuracy;
        }
        models.push(out.checkpoint);
    }
    let secs_6 = start.elapsed().as_secs_f64();
    let adv = &models[1];
    let joint = suite
        .iter()
        .map(|d| {
            let name = d.spec.domain_name.clone();
            let one = vec![(name.clone(), d.test.clone())];
            let spec = train_specific(&d.train, &dims, &cfg(0.0), Some(&adv.vocab.words), &mut quiet()).unwrap();
            let joint = train_joint(
                &spec.checkpoint,
                adv,
                &d.train,
                dims.mlp_hidden_dim,
                &cfg(0.0),
                &mut quiet(),
            )
            .unwrap();
            let fs = evaluate(&spec.checkpoint, &one).unwrap().combined().f1();
            let fj = evaluate(&joint.checkpoint, &one).unwrap().combined().f1();
            (name, fs, fj)
        })
        .collect();
    SuiteRuns {
        general_f1,
        probe,
        secs_6,
        joint,
    }
}

fn criterion_6(r: &SuiteRuns) -> Outcome {
    let [gen, adv, _] = r.general_f1;
    let pass = r.probe[1] <= r.probe[0] - 5.0 && adv >= gen - 0.5 && r.secs_6 < 1800.0;
    outcome(
        pass,
        format!(
            "probe Dom-Gen {:.2}, Dom-Gen-Adv(0.01) {:.2}; combined test F1 {gen:.2} vs {adv:.2}; {:.0}s",
            r.probe[0], r.probe[1], r.secs_6
        ),
    )
}

fn criterion_7(r: &SuiteRuns) -> Outcome {
    let [_, small, large] = r.general_f1;
    outcome(
        large <= small - 3.0,
        format!("combined test F1 λ=1.0 {large:.2} vs λ=0.01 {small:.2}"),
    )
}

fn criterion_8(r: &SuiteRuns) -> Outcome {
    let wins = r.joint.iter().filter(|(_, s, j)| j >= s).count();
    let detail = r
        .joint
        .iter()
        .map(|(n, s, j)| format!("{n} {s:.2}→{j:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(wins >= 3, format!("joint ≥ specific on {wins}/4 domains ({detail})"))
}

fn slotfill(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_slotfill"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .success()
}

fn log_without_clock(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_clock");
            v
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert!(slotfill(&[
        "synth",
        "--suite",
        "--seed",
        "9",
        "--n-train",
        "120",
        "--n-test",
        "20",
        "--out",
        &s(d)
    ]));
    let common = "[model]\nembedding_dim = 8\nhidden_dim = 8\nmlp_hidden_dim = 8\n[train]\nmax_epochs = 3\nseed = 9\n";
    let configs = [
        (
            "gen",
            format!(
                "schema_version = 1\nregime = \"general-adv\"\n{}{common}lambda_adv = 0.01\n",
                ["flights", "hotels", "restaurants", "movies"]
                    .iter()
                    .map(|n| format!("[[corpus]]\ndomain = \"{n}\"\npath = \"{n}.train.bio\"\n"))
                    .collect::<String>()
            ),
        ),
        (
            "spec",
            format!(
                "schema_version = 1\nregime = \"specific\"\nvocab_from = \"gen-a/model.ckpt\"\n\
                 [[corpus]]\ndomain = \"hotels\"\npath = \"hotels.train.bio\"\n{common}"
            ),
        ),
        (
            "joint",
            format!(
                "schema_version = 1\nregime = \"joint\"\n[joint]\nspecific = \"spec-a/model.ckpt\"\n\
                 general = \"gen-a/model.ckpt\"\n[[corpus]]\ndomain = \"hotels\"\npath = \"hotels.train.bio\"\n{common}"
            ),
        ),
    ];
    let mut identical = true;
    for (name, text) in &configs {
        let cfg = d.join(format!("{name}.toml"));
        fs::write(&cfg, text).unwrap();
        for run in ["a", "b"] {
            assert!(slotfill(&[
                "train",
                "--config",
                &s(&cfg),
                "--out",
                &s(&d.join(format!("{name}-{run}")))
            ]));
        }
        let (a, b) = (d.join(format!("{name}-a")), d.join(format!("{name}-b")));
        identical &= fs::read(a.join("model.ckpt")).unwrap() == fs::read(b.join("model.ckpt")).unwrap();
        identical &= log_without_clock(&a.join("metrics.jsonl")) == log_without_clock(&b.join("metrics.jsonl"));
    }
    outcome(
        identical,
        format!("general-adv, specific and joint runs repeated: checkpoints and logs identical: {identical}"),
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
    ];
    let suite = standard_suite(SUITE_SEED);
    let runs = suite_runs(&suite);
    results.push((6, criterion_6(&runs)));
    results.push((7, criterion_7(&runs)));
    results.push((8, criterion_8(&runs)));
    results.push((9, criterion_9()));

    let mut broken = Vec::new();
    for (n, o) in &results {
        println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if o.pass == KNOWN_UNMET.contains(n) {
            broken.push(*n);
        }
    }
    println!("criterion 10: SKIPPED (optional, needs an external corpus)");
    if !broken.is_empty() {
        eprintln!("criteria whose outcome disagrees with KNOWN_UNMET: {broken:?}");
        std::process::exit(1);
    }
}
