//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SLUCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header (model
//! kind, configuration, vocabulary dump, parameter names and shapes), then
//! every parameter as row-major little-endian `f64`, in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{JointConfig, JointModel, ModelConfig, ParamStore, SlotModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLUCKPT\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Specific,
    General,
    GeneralAdv,
    Joint,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Specific => "specific",
            ModelKind::General => "general",
            ModelKind::GeneralAdv => "general-adv",
            ModelKind::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ModelKind::Specific,
            ModelKind::General,
            ModelKind::GeneralAdv,
            ModelKind::Joint,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Slot(SlotModel),
    Joint(JointModel),
}

impl StoredModel {
    pub fn predict(&self, batch: &crate::data::Batch) -> Result<Vec<Vec<usize>>> {
        match self {
            StoredModel::Slot(m) => m.predict(batch),
            StoredModel::Joint(m) => m.predict(batch),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub model: StoredModel,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum StoredConfig {
    Slot(ModelConfig),
    Joint(JointConfig),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: ModelKind,
    config: StoredConfig,
    vocabulary: String,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    fn flat_params(&self) -> ParamStore {
        match &self.model {
            StoredModel::Slot(m) => m.params.clone(),
            StoredModel::Joint(j) => {
                let mut p = ParamStore::new();
                p.extend_prefixed("specific", &j.specific);
                p.extend_prefixed("general", &j.general);
                for (n, t) in j.output.iter() {
                    p.insert(n, t.clone());
                }
                p
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.flat_params();
        let header = Header {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            config: match &self.model {
                StoredModel::Slot(m) => StoredConfig::Slot(m.config.clone()),
                StoredModel::Joint(j) => StoredConfig::Joint(j.config.clone()),
            },
            vocabulary: self.vocab.dump(),
            params: params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vocab = Vocabulary::parse_dump(&header.vocabulary)?;

        let mut params = ParamStore::new();
        let mut offset = 20 + hlen;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad("truncated parameter data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }

        let model = match header.config {
            StoredConfig::Slot(config) => {
                config.validate()?;
                StoredModel::Slot(SlotModel { config, params })
            }
            StoredConfig::Joint(config) => {
                let mut output = ParamStore::new();
                for (n, t) in params.iter() {
                    if n.starts_with("out.") {
                        output.insert(n, t.clone());
                    }
                }
                let joint = JointModel {
                    config,
                    specific: params.sub("specific"),
                    general: params.sub("general"),
                    output,
                };
                joint.validate()?;
                StoredModel::Joint(joint)
            }
        };
        let ck = Checkpoint {
            kind: header.kind,
            vocab,
            model,
        };
        ck.check_tables()?;
        Ok(ck)
    }

    /// Vocabulary sizes must agree with the model dimensions.
    fn check_tables(&self) -> Result<()> {
        let (vocab, labels) = match &self.model {
            StoredModel::Slot(m) => (m.config.vocab_size, m.config.num_slot_labels),
            StoredModel::Joint(j) => (j.config.specific.vocab_size, j.config.num_slot_labels),
        };
        if vocab != self.vocab.words.len() || labels != self.vocab.labels.len() {
            return Err(Error::Checkpoint(format!(
                "tables ({} words, {} labels) disagree with model ({vocab} words, {labels} labels)",
                self.vocab.words.len(),
                self.vocab.labels.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn slot_model(&self) -> Option<&SlotModel> {
        match &self.model {
            StoredModel::Slot(m) => Some(m),
            StoredModel::Joint(_) => None,
        }
    }

    pub fn joint_model(&self) -> Option<&JointModel> {
        match &self.model {
            StoredModel::Joint(j) => Some(j),
            StoredModel::Slot(_) => None,
        }
    }
}
