use std::rc::Rc;

use super::*;
use crate::data::{Batch, Encoded, Utterance, Vocabulary};
use crate::gradcheck::{central_difference, max_relative_error};

pub(crate) fn tiny_config(lambda: f64) -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        hidden_dim: 3,
        mlp_hidden_dim: 5,
        dropout_rate: 0.0,
        vocab_size: 20,
        num_slot_labels: 5,
        num_domains: 3,
        lambda_adv: lambda,
    }
}

pub(crate) fn random_batch(lengths: &[usize], rng: &mut RngState) -> Batch {
    let items: Vec<Encoded> = lengths
        .iter()
        .map(|&n| Encoded {
            words: (0..n).map(|_| 2 + rng.below(18)).collect(),
            labels: (0..n).map(|_| rng.below(5)).collect(),
            domain: rng.below(3),
        })
        .collect();
    let rows: Vec<(usize, &Encoded)> = items.iter().enumerate().collect();
    Batch::from_encoded(&rows)
}

fn model(lambda: f64, seed: u64) -> SlotModel {
    SlotModel::new(tiny_config(lambda), &mut RngState::new(seed)).unwrap()
}

fn loss_value(m: &SlotModel, batch: &Batch) -> LossBundle {
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, true);
    m.forward(&mut tape, &b, batch, Mode::Eval, &mut RngState::new(0), true)
        .unwrap()
        .losses
}

#[test]
fn encoder_output_shape() {
    let m = model(0.0, 1);
    let batch = random_batch(&[4, 2, 3], &mut RngState::new(2));
    let states = m.encoder_states(&batch).unwrap();
    let shapes: Vec<&[usize]> = states.iter().map(|s| s.shape()).collect();
    assert_eq!(shapes, [&[4, 6][..], &[2, 6], &[3, 6]]);
}

#[test]
fn zero_weights_give_zero_states() {
    let mut m = model(0.0, 1);
    for (n, t) in m.params.iter_mut() {
        if n.starts_with("fwd.") || n.starts_with("bwd.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let batch = random_batch(&[3, 1], &mut RngState::new(2));
    for s in m.encoder_states(&batch).unwrap() {
        assert!(s.data().iter().all(|&v| v == 0.0));
    }
}

/// Forward states up to step t depend on w_1..w_t only.
#[test]
fn forward_direction_is_causal() {
    let m = model(0.0, 3);
    let mut rng = RngState::new(4);
    let base = random_batch(&[6], &mut rng);
    let h = 3;
    for k in 0..6 {
        let mut changed = base.clone();
        changed.words[k] = 2 + (changed.words[k] - 2 + 7) % 18;
        let a = &m.encoder_states(&base).unwrap()[0];
        let b = &m.encoder_states(&changed).unwrap()[0];
        for t in 0..6 {
            let same = a.row(t)[..h] == b.row(t)[..h];
            assert_eq!(same, t < k, "perturbed {k}, step {t}");
            let same_bwd = a.row(t)[h..] == b.row(t)[h..];
            assert_eq!(same_bwd, t > k, "perturbed {k}, step {t}");
        }
    }
}

#[test]
fn slot_distribution_rows_sum_to_one() {
    let m = model(0.0, 5);
    let batch = random_batch(&[5, 2, 1, 4], &mut RngState::new(6));
    let p = m.slot_distribution(&batch).unwrap();
    for r in 0..p.rows() {
        let s: f64 = p.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_head_is_uniform() {
    let mut m = model(0.01, 5);
    for (n, t) in m.params.iter_mut() {
        if n.starts_with("slot.") || n.starts_with("dom.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let batch = random_batch(&[3, 2], &mut RngState::new(6));
    let p = m.slot_distribution(&batch).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let d = m.domain_distribution(&batch).unwrap().unwrap();
    assert!(d.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn single_domain_distribution_is_certain() {
    let mut cfg = tiny_config(0.1);
    cfg.num_domains = 1;
    let m = SlotModel::new(cfg, &mut RngState::new(1)).unwrap();
    let mut batch = random_batch(&[3, 2], &mut RngState::new(6));
    batch.domains = vec![0, 0];
    let d = m.domain_distribution(&batch).unwrap().unwrap();
    assert_eq!(d.data(), &[1.0, 1.0]);
}

fn fixed_batch(labels: &[usize]) -> Batch {
    let e = Encoded {
        words: vec![2; labels.len()],
        labels: labels.to_vec(),
        domain: 0,
    };
    Batch::from_encoded(&[(0, &e)])
}

#[test]
fn slot_loss_examples() {
    let ln = f64::ln;
    // P(gold) = 0.5 then 0.25.
    let batch = fixed_batch(&[0, 0]);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(&[vec![ln(0.5), ln(0.5)], vec![ln(0.25), ln(0.75)]]).unwrap());
    let l = slot_loss(&mut tape, z, &batch).unwrap();
    let want = -(ln(0.5) + ln(0.25)) / 2.0;
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    assert!((want - 1.0397).abs() < 1e-4);

    let batch = fixed_batch(&[2, 1, 0]);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 7]));
    let l = slot_loss(&mut tape, z, &batch).unwrap();
    assert!((tape.value(l).item() - ln(7.0)).abs() < 1e-12);

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(&[vec![0.0, 2000.0], vec![2000.0, 0.0]]).unwrap());
    let l = slot_loss(&mut tape, z, &fixed_batch(&[1, 0])).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn domain_loss_examples() {
    let ln = f64::ln;
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let l = domain_loss(&mut tape, z, &[2]).unwrap();
    assert!((tape.value(l).item() - ln(4.0)).abs() < 1e-12);
    let z = tape.constant(Tensor::from_rows(&[vec![ln(0.1), ln(0.9)]]).unwrap());
    let l = domain_loss(&mut tape, z, &[0]).unwrap();
    assert!((tape.value(l).item() - ln(10.0)).abs() < 1e-12);
    let z = tape.constant(Tensor::from_rows(&[vec![3000.0, 0.0]]).unwrap());
    let l = domain_loss(&mut tape, z, &[0]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    assert!(domain_loss(&mut tape, z, &[2]).is_err());
}

/// Single utterance of length T in a batch of one: rows of `h` are steps.
fn pool(h: Vec<Vec<f64>>, w: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let t = h.len();
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_rows(&h).unwrap());
    let cols = w.len();
    let w = tape.constant(Tensor::new(vec![cols, 1], w).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let mask = Rc::new(vec![true; t]);
    let (alpha, c) = attention_pool(&mut tape, h, &mask, 1, w, b).unwrap();
    (tape.value(alpha).data().to_vec(), tape.value(c).data().to_vec())
}

#[test]
fn attention_examples() {
    let h = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
    let (alpha, c) = pool(h, vec![0.0, 0.0]);
    assert!(alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    assert!((c[0] - 1.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);

    let (alpha, c) = pool(vec![vec![0.3, -0.7]], vec![5.0, 1.0]);
    assert_eq!(alpha, [1.0]);
    assert_eq!(c, [0.3, -0.7]);

    let h1 = vec![2f64.ln(), 5.0];
    let h2 = vec![0.0, 7.0];
    let (alpha, c) = pool(vec![h1.clone(), h2.clone()], vec![1.0, 0.0]);
    assert!((alpha[0] - 2.0 / 3.0).abs() < 1e-12 && (alpha[1] - 1.0 / 3.0).abs() < 1e-12);
    for k in 0..2 {
        assert!((c[k] - (2.0 * h1[k] + h2[k]) / 3.0).abs() < 1e-12);
    }
}

#[test]
fn total_loss_combination() {
    let mut tape = Tape::new();
    let ly = tape.constant(Tensor::scalar(2.0));
    let ld = tape.constant(Tensor::scalar(3.0));
    let (_, b) = total_loss(&mut tape, ly, Some(ld), 0.01).unwrap();
    assert_eq!(b.total, 2.0 + 0.01 * 3.0);
    assert!((b.total - 2.03).abs() < 1e-12);
    let (_, b) = total_loss(&mut tape, ly, Some(ld), 0.0).unwrap();
    assert_eq!(b.total, 2.0);
}

/// Gradients of every parameter after backward from `pick(forward)`.
fn grads_of(m: &SlotModel, batch: &Batch, reverse: bool, pick: impl Fn(&Forward) -> Var) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, true);
    let f = m
        .forward(&mut tape, &b, batch, Mode::Eval, &mut RngState::new(0), reverse)
        .unwrap();
    let loss = pick(&f);
    tape.backward(loss).unwrap();
    b.grads(&tape)
}

fn is_domain_param(name: &str) -> bool {
    name.starts_with("dom.")
}

/// Encoder gradients from the adversarial branch are −λ times those of the
/// plain domain loss; domain-head gradients are +λ times.
#[test]
fn reversal_gradient_identity() {
    let batch = random_batch(&[4, 2, 5], &mut RngState::new(8));
    for lambda in [0.01, 0.1, 1.0] {
        let m = model(lambda, 9);
        let total = grads_of(&m, &batch, true, |f| f.total);
        let slot_only = grads_of(&m, &batch, true, |f| f.l_y);
        let plain_d = grads_of(&m, &batch, false, |f| f.l_d.unwrap());
        for (k, (name, _)) in m.params.iter().enumerate() {
            for i in 0..total[k].len() {
                let branch = total[k].data()[i] - slot_only[k].data()[i];
                let sign = if is_domain_param(name) { 1.0 } else { -1.0 };
                let want = sign * lambda * plain_d[k].data()[i];
                assert!(
                    (branch - want).abs() <= 1e-12,
                    "{name}[{i}] λ={lambda}: {branch} vs {want}"
                );
            }
        }
    }
}

#[test]
fn zero_lambda_leaves_encoder_gradient_to_slot_loss() {
    let batch = random_batch(&[3, 3], &mut RngState::new(8));
    let mut m = model(0.5, 9);
    m.config.lambda_adv = 0.0;
    let total = grads_of(&m, &batch, true, |f| f.total);
    let slot_only = grads_of(&m, &batch, true, |f| f.l_y);
    assert_eq!(total, slot_only);
}

#[test]
fn losses_linear_in_lambda() {
    let batch = random_batch(&[3, 4], &mut RngState::new(1));
    let base = loss_value(&model(0.1, 2), &batch);
    for lambda in [0.01, 0.3, 1.0, 2.5] {
        let mut m = model(0.1, 2);
        m.config.lambda_adv = lambda;
        let b = loss_value(&m, &batch);
        assert_eq!(b.l_y, base.l_y);
        assert_eq!(b.l_d, base.l_d);
        assert!((b.total - (b.l_y + lambda * b.l_d)).abs() < 1e-12);
    }
}

/// Words and labels at padded positions never reach the loss or any
/// gradient.
#[test]
fn padding_is_invisible() {
    let m = model(0.1, 4);
    let mut rng = RngState::new(5);
    let batch = random_batch(&[5, 2, 3], &mut rng);
    let reference = grads_of(&m, &batch, true, |f| f.total);
    let ref_loss = loss_value(&m, &batch);
    for trial in 0..10 {
        let mut p = batch.clone();
        for i in 0..p.mask.len() {
            if !p.mask[i] {
                p.words[i] = 2 + (trial * 3 + i) % 18;
                p.labels[i] = (trial + i) % 5;
            }
        }
        let l = loss_value(&m, &p);
        assert_eq!(l.total.to_bits(), ref_loss.total.to_bits());
        assert_eq!(l.l_d.to_bits(), ref_loss.l_d.to_bits());
        assert_eq!(grads_of(&m, &p, true, |f| f.total), reference);
    }
}

/// Dropout in eval mode is the identity; in training mode it changes the
/// loss and depends only on the seed.
#[test]
fn dropout_modes() {
    let mut m = model(0.1, 4);
    m.config.dropout_rate = 0.5;
    let batch = random_batch(&[4, 3], &mut RngState::new(5));
    let run = |mode: Mode, seed: u64| {
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, true);
        m.forward(&mut tape, &b, &batch, mode, &mut RngState::new(seed), true)
            .unwrap()
            .losses
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_eq!(run(Mode::Train, 1), run(Mode::Train, 1));
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
    assert_ne!(run(Mode::Train, 1), run(Mode::Eval, 1));
}

/// Central differences through the whole model, reversal included (the
/// unreversed graph is differenced and the branch sign flipped).
#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = RngState::new(100 + seed);
        let m = model(0.3, seed);
        let lengths: Vec<usize> = (0..3).map(|_| 1 + rng.below(5)).collect();
        let batch = random_batch(&lengths, &mut rng);
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        // l_y − λ·l_d through the plain graph has the encoder gradient of
        // the reversed objective; the head part is checked separately.
        let objective = |sign: f64| {
            let names = names.clone();
            let batch = batch.clone();
            let cfg = m.config.clone();
            move |xs: &[Tensor]| {
                let mut p = ParamStore::new();
                for (n, t) in names.iter().zip(xs) {
                    p.insert(n.clone(), t.clone());
                }
                let mm = SlotModel {
                    config: cfg.clone(),
                    params: p,
                };
                let mut tape = Tape::new();
                let b = mm.params.bind(&mut tape, true);
                let f = mm
                    .forward(&mut tape, &b, &batch, Mode::Eval, &mut RngState::new(0), false)
                    .unwrap();
                f.losses.l_y + sign * cfg.lambda_adv * f.losses.l_d
            }
        };
        let analytic = grads_of(&m, &batch, true, |f| f.total);
        let enc_numeric = central_difference(objective(-1.0), &inputs, 1e-5);
        let head_numeric = central_difference(objective(1.0), &inputs, 1e-5);
        for (k, name) in names.iter().enumerate() {
            let numeric = if is_domain_param(name) {
                &head_numeric[k]
            } else {
                &enc_numeric[k]
            };
            let err = max_relative_error(&analytic[k..=k], std::slice::from_ref(numeric), 1e-6);
            assert!(err < 1e-4, "seed {seed} {name}: {err}");
        }
    }
}

#[test]
fn wrong_word_id_is_a_data_error() {
    let m = model(0.0, 1);
    let mut batch = random_batch(&[2], &mut RngState::new(1));
    batch.words[0] = 99;
    assert!(matches!(m.slot_distribution(&batch), Err(Error::Data(_))));
}

fn vocab() -> Vocabulary {
    let corpus: Vec<Utterance> = ["x", "y", "z"]
        .iter()
        .enumerate()
        .map(|(k, d)| Utterance {
            tokens: (0..6).map(|i| format!("w{}", 6 * k + i)).collect(),
            labels: ["O", "B-a", "I-a", "B-b", "I-b", "O"].map(String::from).to_vec(),
            domain: d.to_string(),
        })
        .collect();
    Vocabulary::build(&corpus).unwrap()
}

#[test]
fn checkpoint_round_trip() {
    let m = model(0.1, 3);
    let ck = Checkpoint {
        kind: ModelKind::GeneralAdv,
        vocab: vocab(),
        model: StoredModel::Slot(m.clone()),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let batch = random_batch(&[3, 5], &mut RngState::new(2));
    assert_eq!(back.model.predict(&batch).unwrap(), m.predict(&batch).unwrap());

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(b"nonsense").is_err());
}

fn joint(seed: u64) -> JointModel {
    let spec = model(0.0, seed);
    let gen = model(0.1, seed + 1);
    JointModel::new(&spec, &gen, 5, 6, 0.0, &mut RngState::new(seed + 2)).unwrap()
}

#[test]
fn joint_checkpoint_round_trip() {
    let j = joint(1);
    let ck = Checkpoint {
        kind: ModelKind::Joint,
        vocab: vocab(),
        model: StoredModel::Joint(j.clone()),
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.joint_model().unwrap().encoder_digest(), j.encoder_digest());
}

#[test]
fn joint_distribution_shape() {
    let j = joint(4);
    let batch = random_batch(&[3, 1, 4], &mut RngState::new(5));
    let p = j.distribution(&batch).unwrap();
    assert_eq!(p.shape(), &[12, 5]);
    for r in 0..p.rows() {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Only the output layer sees gradients; with zero general-half input
/// weights, the general encoder has no influence.
#[test]
fn joint_freeze_and_isolation() {
    let mut j = joint(7);
    let batch = random_batch(&[3, 4], &mut RngState::new(6));
    let mut tape = Tape::new();
    let out = j.output.bind(&mut tape, true);
    let logits = j
        .forward(&mut tape, &out, &batch, Mode::Train, &mut RngState::new(1))
        .unwrap();
    let loss = slot_loss(&mut tape, logits, &batch).unwrap();
    tape.backward(loss).unwrap();
    for (g, (name, _)) in out.grads(&tape).iter().zip(j.output.iter()) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} received no gradient");
    }

    let s = j.config.specific.state_dim();
    let w1 = j.output.iter_mut().find(|(n, _)| *n == "out.w1").unwrap().1;
    let cols = w1.cols();
    for r in s..w1.rows() {
        w1.data_mut()[r * cols..(r + 1) * cols]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let before = j.distribution(&batch).unwrap();
    for (_, t) in j.general.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.37);
    }
    assert_eq!(j.distribution(&batch).unwrap(), before);
}

#[test]
fn joint_rejects_mismatched_vocabularies() {
    let spec = model(0.0, 1);
    let mut cfg = tiny_config(0.0);
    cfg.vocab_size = 21;
    let gen = SlotModel::new(cfg, &mut RngState::new(2)).unwrap();
    assert!(matches!(
        JointModel::new(&spec, &gen, 5, 4, 0.0, &mut RngState::new(3)),
        Err(Error::Config(_))
    ));
}

#[test]
fn stacked_states_are_time_major() {
    let a = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0]]).unwrap();
    let s = stack_states(&[&a, &b], 2);
    assert_eq!(s.data(), &[1.0, 3.0, 2.0, 0.0]);
}
