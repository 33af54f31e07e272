//! BIO corpora, vocabularies and padded mini-batches.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::RngState;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

const VOCAB_HEADER: &str = "slotfill-vocab 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub domain: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `O`, `B-<type>` or `I-<type>` with a non-empty type.
pub fn is_bio_label(label: &str) -> bool {
    label == "O"
        || label
            .strip_prefix("B-")
            .or_else(|| label.strip_prefix("I-"))
            .is_some_and(|t| !t.is_empty() && !t.chars().any(char::is_whitespace))
}

/// Parses BIO text: one `<token><TAB or space><label>` per line, utterances
/// separated by a blank line.
pub fn parse_bio(text: &str, domain: &str, path: &Path) -> Result<Vec<Utterance>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let last_content = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    let mut current = Utterance {
        tokens: Vec::new(),
        labels: Vec::new(),
        domain: domain.to_string(),
    };
    let Some(last_content) = last_content else {
        return Ok(out);
    };
    for (i, line) in lines[..=last_content].iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            if current.is_empty() {
                return Err(err(lineno, "empty utterance".into()));
            }
            out.push(std::mem::replace(
                &mut current,
                Utterance {
                    tokens: Vec::new(),
                    labels: Vec::new(),
                    domain: domain.to_string(),
                },
            ));
            continue;
        }
        let (token, label) = split_line(line).ok_or_else(|| err(lineno, format!("malformed line {line:?}")))?;
        if !is_bio_label(label) {
            return Err(err(lineno, format!("illegal BIO label {label:?}")));
        }
        current.tokens.push(token.to_string());
        current.labels.push(label.to_string());
    }
    if !current.is_empty() {
        out.push(current);
    }
    Ok(out)
}

fn split_line(line: &str) -> Option<(&str, &str)> {
    let (token, label) = match line.split_once('\t') {
        Some(pair) => pair,
        None => line.split_once(' ')?,
    };
    if token.is_empty() || label.is_empty() || label.contains(['\t', ' ']) || token.contains(['\t', ' ']) {
        return None;
    }
    Some((token, label))
}

pub fn read_bio(path: impl AsRef<Path>, domain: &str) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bio(&text, domain, path)
}

/// Renders utterances as TAB-separated BIO text.
pub fn format_bio(utterances: &[Utterance]) -> String {
    let mut s = String::new();
    for u in utterances {
        for (t, l) in u.tokens.iter().zip(&u.labels) {
            let _ = writeln!(s, "{t}\t{l}");
        }
        s.push('\n');
    }
    s
}

pub fn write_bio(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_bio(utterances)).map_err(|e| Error::io(path, e))
}

/// Dense id table with first-occurrence ordering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl IdMap {
    fn insert(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn from_names(names: Vec<String>) -> Result<Self> {
        let mut m = IdMap::default();
        for n in &names {
            if m.ids.contains_key(n) {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry {n:?}")));
            }
            m.insert(n);
        }
        Ok(m)
    }
}

/// Word, slot-label and domain tables. Word ids 0 and 1 are reserved for
/// padding and unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub words: IdMap,
    pub labels: IdMap,
    pub domains: IdMap,
}

impl Vocabulary {
    /// Builds all three tables from the same training utterances.
    pub fn build(train: &[Utterance]) -> Result<Self> {
        Self::build_split(train, train)
    }

    /// Words from `word_source`; labels and domains from `label_source`.
    /// Lets a single-domain model share the word table of a multi-domain one.
    pub fn build_split(word_source: &[Utterance], label_source: &[Utterance]) -> Result<Self> {
        if word_source.is_empty() || label_source.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words = IdMap::default();
        words.insert(PAD);
        words.insert(UNK);
        for u in word_source {
            for t in &u.tokens {
                words.insert(t);
            }
        }
        let mut labels = IdMap::default();
        let mut domains = IdMap::default();
        for u in label_source {
            domains.insert(&u.domain);
            for l in &u.labels {
                labels.insert(l);
            }
        }
        Ok(Vocabulary { words, labels, domains })
    }

    /// An existing word table with labels and domains from `label_source`.
    pub fn with_words(words: &IdMap, label_source: &[Utterance]) -> Result<Self> {
        let mut v = Self::build_split(label_source, label_source)?;
        v.words = words.clone();
        Ok(v)
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.words.id(token).unwrap_or(UNK_ID)
    }

    /// Deterministic text dump, entries listed in id order.
    pub fn dump(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for (section, map) in [
            ("words", &self.words),
            ("labels", &self.labels),
            ("domains", &self.domains),
        ] {
            let _ = writeln!(s, "[{section}] {}", map.len());
            for (i, n) in map.names().iter().enumerate() {
                let _ = writeln!(s, "{i}\t{n}");
            }
        }
        s
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(format!("vocabulary dump: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(bad("missing or unsupported header"));
        }
        let mut maps = Vec::new();
        for section in ["words", "labels", "domains"] {
            let head = lines.next().ok_or_else(|| bad("truncated"))?;
            let count: usize = head
                .strip_prefix(&format!("[{section}] "))
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(&format!("bad section header {head:?}")))?;
            let mut names = Vec::with_capacity(count);
            for i in 0..count {
                let line = lines.next().ok_or_else(|| bad("truncated"))?;
                let (id, name) = line.split_once('\t').ok_or_else(|| bad("malformed entry"))?;
                if id.parse::<usize>().ok() != Some(i) {
                    return Err(bad("ids out of order"));
                }
                names.push(name.to_string());
            }
            maps.push(IdMap::from_names(names)?);
        }
        let domains = maps.pop().unwrap();
        let labels = maps.pop().unwrap();
        let words = maps.pop().unwrap();
        if words.name(PAD_ID) != PAD || words.name(UNK_ID) != UNK {
            return Err(bad("reserved word ids missing"));
        }
        Ok(Vocabulary { words, labels, domains })
    }
}

/// An utterance mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub words: Vec<usize>,
    pub labels: Vec<usize>,
    pub domain: usize,
}

pub fn encode(u: &Utterance, vocab: &Vocabulary, index: usize) -> Result<Encoded> {
    let labels = u
        .labels
        .iter()
        .map(|l| {
            vocab
                .labels
                .id(l)
                .ok_or_else(|| Error::Data(format!("utterance {index}: unknown slot label {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let domain = vocab
        .domains
        .id(&u.domain)
        .ok_or_else(|| Error::Data(format!("utterance {index}: unknown domain {:?}", u.domain)))?;
    Ok(Encoded {
        words: u.tokens.iter().map(|t| vocab.word_id(t)).collect(),
        labels,
        domain,
    })
}

pub fn encode_all(utterances: &[Utterance], vocab: &Vocabulary) -> Result<Vec<Encoded>> {
    utterances
        .iter()
        .enumerate()
        .map(|(i, u)| encode(u, vocab, i))
        .collect()
}

/// Word ids that occur exactly once in `corpus`.
pub fn singletons(corpus: &[Encoded]) -> Vec<bool> {
    let max = corpus.iter().flat_map(|e| e.words.iter()).copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for e in corpus {
        for &w in &e.words {
            counts[w] += 1;
        }
    }
    counts.iter().map(|&c| c == 1).collect()
}

/// Padded mini-batch, row-major `[B × T_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub t_max: usize,
    pub words: Vec<usize>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// Position of each row in the corpus the batch was drawn from.
    pub origin: Vec<usize>,
}

impl Batch {
    pub fn from_encoded(items: &[(usize, &Encoded)]) -> Self {
        let size = items.len();
        let t_max = items.iter().map(|(_, e)| e.words.len()).max().unwrap_or(0);
        let mut b = Batch {
            size,
            t_max,
            words: vec![PAD_ID; size * t_max],
            labels: vec![0; size * t_max],
            domains: Vec::with_capacity(size),
            mask: vec![false; size * t_max],
            lengths: Vec::with_capacity(size),
            origin: Vec::with_capacity(size),
        };
        for (r, (origin, e)) in items.iter().enumerate() {
            let n = e.words.len();
            b.words[r * t_max..r * t_max + n].copy_from_slice(&e.words);
            b.labels[r * t_max..r * t_max + n].copy_from_slice(&e.labels);
            b.mask[r * t_max..r * t_max + n].iter_mut().for_each(|m| *m = true);
            b.domains.push(e.domain);
            b.lengths.push(n);
            b.origin.push(*origin);
        }
        b
    }

    /// Index of `(row, step)` in time-major order.
    pub fn time_major(&self, row: usize, step: usize) -> usize {
        step * self.size + row
    }

    /// Any row-major `[B × T_max]` field reordered time-major.
    pub fn to_time_major<T: Copy>(&self, field: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(field.len());
        for t in 0..self.t_max {
            for b in 0..self.size {
                out.push(field[b * self.t_max + t]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    /// Probability of replacing a singleton word by UNK; `None` disables it.
    pub singleton_unk: Option<f64>,
}

/// Encodes and batches a corpus. Singleton replacement draws from `rng` in
/// corpus order first, then the order is shuffled; the last short batch is
/// kept.
pub fn encode_and_batch(
    utterances: &[Utterance],
    vocab: &Vocabulary,
    opts: BatchOptions,
    rng: &mut RngState,
) -> Result<Vec<Batch>> {
    let encoded = encode_all(utterances, vocab)?;
    make_batches(&encoded, opts, rng)
}

pub fn make_batches(corpus: &[Encoded], opts: BatchOptions, rng: &mut RngState) -> Result<Vec<Batch>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut items: Vec<Encoded> = corpus.to_vec();
    if let Some(p) = opts.singleton_unk {
        let single = singletons(corpus);
        for e in &mut items {
            for w in &mut e.words {
                if single[*w] && rng.next_f64() < p {
                    *w = UNK_ID;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    if opts.shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order
        .chunks(opts.batch_size)
        .map(|chunk| {
            let rows: Vec<(usize, &Encoded)> = chunk.iter().map(|&i| (i, &items[i])).collect();
            Batch::from_encoded(&rows)
        })
        .collect())
}
