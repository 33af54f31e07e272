use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use slotfill::data::{format_bio, read_bio, Utterance};
use slotfill::eval::{evaluate, predict_labels};
use slotfill::model::Checkpoint;
use slotfill::synth::{generate_suite, suite_specs, GrammarSpec, SuiteDomain, SUITE_SHARED_FRACTION};
use slotfill::train::{probe_domain_accuracy, train_general, train_joint, train_specific, EpochRecord, TrainOutcome};
use slotfill::{Error, Result};

use crate::config::{CorpusEntry, ExperimentConfig, Regime};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_corpora(entries: &[CorpusEntry]) -> Result<Vec<Utterance>> {
    let mut all = Vec::new();
    for e in entries {
        all.extend(read_bio(&e.path, &e.domain)?);
    }
    Ok(all)
}

/// Test sets grouped by domain in first-appearance order.
fn read_test_sets(entries: &[CorpusEntry]) -> Result<Vec<(String, Vec<Utterance>)>> {
    let mut sets: Vec<(String, Vec<Utterance>)> = Vec::new();
    for e in entries {
        let utts = read_bio(&e.path, &e.domain)?;
        match sets.iter_mut().find(|(d, _)| *d == e.domain) {
            Some((_, v)) => v.extend(utts),
            None => sets.push((e.domain.clone(), utts)),
        }
    }
    Ok(sets)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Runs one training regime. Writes `model.ckpt`, `metrics.jsonl`, the
/// effective `config.toml` and, with test files, `report.txt`.
pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out);
    }
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: set out_dir or pass --out".into()))?;
    let corpus = read_corpora(&cfg.corpus)?;
    let tests = read_test_sets(&cfg.test)?;

    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let effective = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out_dir.join("config.toml"), effective.as_bytes())?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut sink = |r: &EpochRecord| -> Result<()> {
        writeln!(log, "{}", r.to_json())
            .and_then(|_| log.flush())
            .map_err(io_err(&log_path))
    };

    let outcome: TrainOutcome = match cfg.regime {
        Regime::Specific => {
            let words = match &cfg.vocab_from {
                Some(p) => Some(Checkpoint::load(p)?.vocab.words),
                None => None,
            };
            train_specific(&corpus, &cfg.model, &cfg.train, words.as_ref(), &mut sink)?
        }
        Regime::General | Regime::GeneralAdv => train_general(&corpus, &cfg.model, &cfg.train, &mut sink)?,
        Regime::Joint => {
            let j = cfg.joint.as_ref().expect("validated");
            let spec = Checkpoint::load(j.specific.as_ref().expect("validated"))?;
            let gen = Checkpoint::load(j.general.as_ref().expect("validated"))?;
            train_joint(&spec, &gen, &corpus, cfg.model.mlp_hidden_dim, &cfg.train, &mut sink)?
        }
    };
    drop(log);
    outcome.checkpoint.save(out_dir.join("model.ckpt"))?;
    eprintln!(
        "best epoch {} dev F1 {:.2}, {} steps",
        outcome.best_epoch, outcome.best_dev_f1, outcome.steps
    );

    if !tests.is_empty() {
        let mut report = evaluate(&outcome.checkpoint, &tests)?;
        if cfg.probe {
            let encoder = outcome.checkpoint.slot_model().expect("validated regime");
            let pooled: Vec<Utterance> = tests.iter().flat_map(|(_, u)| u.iter().cloned()).collect();
            let probe = probe_domain_accuracy(encoder, &outcome.checkpoint.vocab, &corpus, &pooled, &cfg.train)?;
            report.probe_accuracy = Some(probe.accuracy);
        }
        let text = report.render();
        write_file(&out_dir.join("report.txt"), text.as_bytes())?;
        print!("{text}");
    }
    Ok(())
}

/// `name=path`, or a bare path whose file name up to the first dot names
/// the domain.
pub fn parse_test_arg(arg: &str) -> Result<CorpusEntry> {
    if let Some((name, path)) = arg.split_once('=') {
        if name.is_empty() || path.is_empty() {
            return Err(Error::Config(format!("bad test file argument {arg:?}")));
        }
        return Ok(CorpusEntry {
            domain: name.to_string(),
            path: PathBuf::from(path),
        });
    }
    let path = PathBuf::from(arg);
    let domain = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('.').next())
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::Config(format!("cannot derive a domain name from {arg:?}")))?
        .to_string();
    Ok(CorpusEntry { domain, path })
}

pub fn eval(ckpt: &Path, tests: &[String], report_path: Option<&Path>) -> Result<()> {
    let entries = tests.iter().map(|t| parse_test_arg(t)).collect::<Result<Vec<_>>>()?;
    let sets = read_test_sets(&entries)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let text = evaluate(&ckpt, &sets)?.render();
    if let Some(p) = report_path {
        write_file(p, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

/// Token blocks separated by blank lines. Only the first field of a line is
/// read, so labelled BIO files are accepted too. Returns the blocks and the
/// line numbers of empty blocks.
pub fn parse_token_blocks(text: &str) -> (Vec<Vec<String>>, Vec<usize>) {
    let mut blocks = Vec::new();
    let mut empty = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut blank_run = 0;
    let mut seen_content = false;
    for (i, line) in text.lines().enumerate() {
        match line.split_whitespace().next() {
            Some(tok) => {
                if blank_run > 1 || (blank_run > 0 && !seen_content) {
                    empty.push(i);
                }
                blank_run = 0;
                seen_content = true;
                current.push(tok.to_string());
            }
            None => {
                blank_run += 1;
                if !current.is_empty() {
                    blocks.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    (blocks, empty)
}

pub fn predict(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    let (blocks, empty) = parse_token_blocks(&text);
    for line in empty {
        eprintln!(
            "warning: {}: empty utterance block before line {line} skipped",
            input.display()
        );
    }
    let ckpt = Checkpoint::load(ckpt)?;
    let labels = predict_labels(&ckpt, &blocks)?;
    let utts: Vec<Utterance> = blocks
        .into_iter()
        .zip(labels)
        .map(|(tokens, labels)| Utterance {
            tokens,
            labels,
            domain: String::new(),
        })
        .collect();
    write_file(output, format_bio(&utts).as_bytes())
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    file: String,
    domain: String,
    split: &'static str,
    utterances: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    files: Vec<ManifestEntry>,
}

pub enum SynthSource {
    Suite,
    Spec(PathBuf),
}

/// Writes `<domain>.train.bio`, `<domain>.test.bio` and `<domain>.grammar.toml`
/// per domain, plus `manifest.json` with utterance counts and SHA-256 hashes.
pub fn synth(source: SynthSource, seed: u64, n_train: usize, n_test: usize, out: &Path) -> Result<()> {
    let specs = match source {
        SynthSource::Suite => suite_specs(SUITE_SHARED_FRACTION),
        SynthSource::Spec(p) => {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            vec![GrammarSpec::from_toml(&text)?]
        }
    };
    let suite: Vec<SuiteDomain> = generate_suite(&specs, seed, n_train, n_test)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut files = Vec::new();
    for d in &suite {
        let name = &d.spec.domain_name;
        write_file(&out.join(format!("{name}.grammar.toml")), d.spec.to_toml().as_bytes())?;
        for (split, utts) in [("train", &d.train), ("test", &d.test)] {
            let file = format!("{name}.{split}.bio");
            let text = format_bio(utts);
            write_file(&out.join(&file), text.as_bytes())?;
            files.push(ManifestEntry {
                file,
                domain: name.clone(),
                split,
                utterances: utts.len(),
                sha256: hex::encode(Sha256::digest(text.as_bytes())),
            });
        }
    }
    let manifest = serde_json::to_string_pretty(&Manifest { seed, files }).expect("manifest serializes");
    write_file(&out.join("manifest.json"), format!("{manifest}\n").as_bytes())
}
