//! conlleval-style chunk scoring and evaluation reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A labelled span `[start, end]` (inclusive) in one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub utterance: usize,
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

fn split(label: &str) -> (char, &str) {
    match label.split_once('-') {
        Some((p, t)) if p == "B" || p == "I" => (p.chars().next().unwrap(), t),
        _ => ('O', ""),
    }
}

/// Maximal chunks of a BIO sequence. An `I-x` that does not continue an open
/// `x` chunk starts a new one, as conlleval does.
pub fn extract_chunks(labels: &[impl AsRef<str>], utterance: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, l) in labels.iter().enumerate() {
        let (tag, kind) = split(l.as_ref());
        let continues = tag == 'I' && open.as_ref().is_some_and(|(k, _)| k == kind);
        if continues {
            continue;
        }
        if let Some((k, s)) = open.take() {
            out.push(Chunk {
                utterance,
                kind: k,
                start: s,
                end: i - 1,
            });
        }
        if tag != 'O' {
            open = Some((kind.to_string(), i));
        }
    }
    if let Some((k, s)) = open {
        out.push(Chunk {
            utterance,
            kind: k,
            start: s,
            end: labels.len() - 1,
        });
    }
    out
}

/// Raw counts behind precision, recall and F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub utterances: usize,
}

impl ChunkCounts {
    pub fn merge(&mut self, o: &ChunkCounts) {
        self.correct += o.correct;
        self.predicted += o.predicted;
        self.gold += o.gold;
        self.tokens += o.tokens;
        self.correct_tokens += o.correct_tokens;
        self.utterances += o.utterances;
    }

    pub fn precision(&self) -> f64 {
        pct(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        pct(self.correct, self.gold)
    }

    /// `2PR/(P+R)`, or 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn token_accuracy(&self) -> f64 {
        pct(self.correct_tokens, self.tokens)
    }
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Micro-averaged chunk counts over aligned gold/predicted label sequences.
pub fn chunk_counts<G, P>(gold: &[G], pred: &[P]) -> Result<ChunkCounts>
where
    G: AsRef<[String]>,
    P: AsRef<[String]>,
{
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold utterances but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut c = ChunkCounts::default();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "utterance {i}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gc = extract_chunks(g, i);
        let pc = extract_chunks(p, i);
        // both lists are sorted by start and non-overlapping
        let (mut a, mut b) = (0, 0);
        while a < gc.len() && b < pc.len() {
            match (gc[a].start, gc[a].end).cmp(&(pc[b].start, pc[b].end)) {
                std::cmp::Ordering::Equal => {
                    if gc[a].kind == pc[b].kind {
                        c.correct += 1;
                    }
                    a += 1;
                    b += 1;
                }
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
            }
        }
        c.gold += gc.len();
        c.predicted += pc.len();
        c.tokens += g.len();
        c.correct_tokens += g.iter().zip(p).filter(|(x, y)| x == y).count();
        c.utterances += 1;
    }
    Ok(c)
}

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
}

impl From<&ChunkCounts> for Scores {
    fn from(c: &ChunkCounts) -> Self {
        Scores {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            token_accuracy: c.token_accuracy(),
        }
    }
}

pub fn chunk_f1<G, P>(gold: &[G], pred: &[P]) -> Result<Scores>
where
    G: AsRef<[String]>,
    P: AsRef<[String]>,
{
    Ok(Scores::from(&chunk_counts(gold, pred)?))
}

/// Per-domain and pooled scores. `combined` is micro-averaged over the
/// pooled utterances of every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub domains: Vec<(String, ChunkCounts)>,
    pub probe_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn combined(&self) -> ChunkCounts {
        let mut c = ChunkCounts::default();
        for (_, d) in &self.domains {
            c.merge(d);
        }
        c
    }

    pub fn domain(&self, name: &str) -> Option<&ChunkCounts> {
        self.domains.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    /// Key-value text, one block per domain followed by `[combined]`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut block = |name: &str, c: &ChunkCounts, extra: &str| {
            let _ = writeln!(s, "[{name}]");
            s.push_str(extra);
            let _ = writeln!(s, "utterances = {}", c.utterances);
            let _ = writeln!(s, "gold_chunks = {}", c.gold);
            let _ = writeln!(s, "predicted_chunks = {}", c.predicted);
            let _ = writeln!(s, "correct_chunks = {}", c.correct);
            let _ = writeln!(s, "precision = {:.2}", c.precision());
            let _ = writeln!(s, "recall = {:.2}", c.recall());
            let _ = writeln!(s, "f1 = {:.2}", c.f1());
            let _ = writeln!(s, "token_accuracy = {:.2}", c.token_accuracy());
            s.push('\n');
        };
        for (name, c) in &self.domains {
            block(name, c, "");
        }
        let mut extra = String::from("aggregation = \"micro\"\n");
        if let Some(p) = self.probe_accuracy {
            let _ = writeln!(extra, "probe_accuracy = {p:.2}");
        }
        block("combined", &self.combined(), &extra);
        s
    }
}
