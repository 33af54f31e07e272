//! Running a checkpoint over corpora: label prediction and scored reports.

use crate::data::{Encoded, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{chunk_counts, EvalReport};
use crate::model::Checkpoint;
use crate::train::eval_batches;

/// Predicted label names for each token sequence. Unknown words map to UNK.
pub fn predict_labels(ckpt: &Checkpoint, utterances: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
    let items: Vec<Encoded> = utterances
        .iter()
        .map(|toks| Encoded {
            words: toks.iter().map(|t| ckpt.vocab.word_id(t)).collect(),
            labels: vec![0; toks.len()],
            domain: 0,
        })
        .collect();
    let mut out: Vec<Vec<String>> = vec![Vec::new(); items.len()];
    for batch in eval_batches(&items)? {
        for (ids, &i) in ckpt.model.predict(&batch)?.into_iter().zip(&batch.origin) {
            out[i] = ids.into_iter().map(|l| ckpt.vocab.labels.name(l).to_string()).collect();
        }
    }
    Ok(out)
}

/// Chunk scores of `ckpt` on each named test set. Every gold label must
/// belong to the checkpoint's label set.
pub fn evaluate(ckpt: &Checkpoint, sets: &[(String, Vec<Utterance>)]) -> Result<EvalReport> {
    let mut domains = Vec::with_capacity(sets.len());
    for (name, corpus) in sets {
        for (i, u) in corpus.iter().enumerate() {
            if let Some(l) = u.labels.iter().find(|l| ckpt.vocab.labels.id(l).is_none()) {
                return Err(Error::Data(format!(
                    "{name}: utterance {i} has label {l:?} outside the model's label set"
                )));
            }
        }
        let tokens: Vec<Vec<String>> = corpus.iter().map(|u| u.tokens.clone()).collect();
        let pred = predict_labels(ckpt, &tokens)?;
        let gold: Vec<&[String]> = corpus.iter().map(|u| u.labels.as_slice()).collect();
        domains.push((name.clone(), chunk_counts(&gold, &pred)?));
    }
    Ok(EvalReport {
        domains,
        probe_accuracy: None,
    })
}
