//! The experiment file read by `slotfill train`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slotfill::train::{ModelDims, TrainConfig};
use slotfill::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Specific,
    General,
    GeneralAdv,
    Joint,
}

/// One BIO file and the domain its utterances belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub domain: String,
    pub path: PathBuf,
}

/// Frozen encoders for the joint regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSources {
    pub specific: Option<PathBuf>,
    pub general: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub corpus: Vec<CorpusEntry>,
    #[serde(default)]
    pub test: Vec<CorpusEntry>,
    /// Specific regime only: reuse the word table of this checkpoint, so
    /// the result can later be paired with it in a joint model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_from: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointSources>,
    /// Train a domain probe on the final encoder and add its test accuracy
    /// to the report.
    #[serde(default)]
    pub probe: bool,
}

impl ExperimentConfig {
    /// Reads and validates `path`. Relative paths inside the file are
    /// resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus
            .iter_mut()
            .chain(self.test.iter_mut())
            .for_each(|c| fix(&mut c.path));
        self.out_dir.iter_mut().for_each(fix);
        self.vocab_from.iter_mut().for_each(fix);
        if let Some(j) = &mut self.joint {
            j.specific.iter_mut().chain(j.general.iter_mut()).for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        if self.corpus.is_empty() {
            return fail("no [[corpus]] entries");
        }
        let domains: BTreeSet<&str> = self.corpus.iter().map(|c| c.domain.as_str()).collect();
        let lambda = self.train.lambda_adv;
        match self.regime {
            Regime::Specific | Regime::General | Regime::Joint if lambda != 0.0 => {
                return fail("lambda_adv is only used by regime general-adv");
            }
            Regime::GeneralAdv if lambda <= 0.0 => return fail("regime general-adv needs lambda_adv > 0"),
            Regime::GeneralAdv if domains.len() < 2 => return fail("adversary requires ≥ 2 domains"),
            Regime::Specific | Regime::Joint if domains.len() != 1 => {
                return fail("this regime trains on exactly one domain");
            }
            _ => {}
        }
        if self.vocab_from.is_some() && self.regime != Regime::Specific {
            return fail("vocab_from is only valid for regime specific");
        }
        match (&self.joint, self.regime) {
            (Some(j), Regime::Joint) if j.specific.is_none() || j.general.is_none() => {
                return fail("regime joint needs both [joint] specific and general checkpoint paths");
            }
            (None, Regime::Joint) => return fail("regime joint needs a [joint] section with two checkpoint paths"),
            (Some(_), r) if r != Regime::Joint => return fail("[joint] is only valid for regime joint"),
            _ => {}
        }
        if self.probe {
            if !matches!(self.regime, Regime::General | Regime::GeneralAdv) {
                return fail("probe needs regime general or general-adv");
            }
            if self.test.is_empty() {
                return fail("probe needs [[test]] files");
            }
        }
        Ok(())
    }
}
