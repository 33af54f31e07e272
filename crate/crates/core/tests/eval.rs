use slotfill::data::{read_bio, write_bio, Utterance};
use slotfill::eval::{evaluate, predict_labels};
use slotfill::model::Checkpoint;
use slotfill::synth::{generate, suite_specs};
use slotfill::train::{train_specific, ModelDims, TrainConfig};
use slotfill::{Error, RngState};
use tempfile::TempDir;

fn trained() -> (Checkpoint, Vec<Utterance>) {
    let corpus = generate(&suite_specs(0.5)[2], 60, &mut RngState::new(3)).unwrap();
    let dims = ModelDims {
        embedding_dim: 8,
        hidden_dim: 8,
        mlp_hidden_dim: 8,
    };
    let cfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = train_specific(&corpus, &dims, &cfg, None, &mut |_| Ok(())).unwrap();
    (out.checkpoint, corpus)
}

#[test]
fn saved_checkpoint_scores_identically() {
    let (ckpt, corpus) = trained();
    let dir = TempDir::new().unwrap();
    let bio = dir.path().join("restaurants.bio");
    let path = dir.path().join("model.ckpt");
    write_bio(&bio, &corpus).unwrap();
    ckpt.save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    let sets = vec![("restaurants".to_string(), read_bio(&bio, "restaurants").unwrap())];
    let a = evaluate(&ckpt, &sets).unwrap();
    let b = evaluate(&loaded, &sets).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.render(), b.render());
    assert_eq!(a.combined().utterances, 60);
    assert!(a.render().contains("[restaurants]") && a.render().contains("[combined]"));
}

#[test]
fn predictions_align_with_input() {
    let (ckpt, corpus) = trained();
    let mut tokens: Vec<Vec<String>> = corpus.iter().take(7).map(|u| u.tokens.clone()).collect();
    tokens.push(vec!["never-seen-word".into(), "another".into()]);
    let pred = predict_labels(&ckpt, &tokens).unwrap();
    assert_eq!(pred.len(), tokens.len());
    for (p, t) in pred.iter().zip(&tokens) {
        assert_eq!(p.len(), t.len());
        assert!(p.iter().all(|l| ckpt.vocab.labels.id(l).is_some()));
    }
    assert!(predict_labels(&ckpt, &[]).unwrap().is_empty());
}

#[test]
fn foreign_labels_are_rejected() {
    let (ckpt, _) = trained();
    let odd = Utterance {
        tokens: vec!["a".into(), "b".into()],
        labels: vec!["O".into(), "B-warp_drive".into()],
        domain: "x".into(),
    };
    let err = evaluate(&ckpt, &[("x".to_string(), vec![odd])]).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("B-warp_drive")));
}
