//! Binary checkpoints: the 8-byte magic `MSRCKPT1`, a little-endian `u64`
//! header length, a UTF-8 JSON header, then every tensor as little-endian
//! `f64` values in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use msr_core::features::Standardizer;
use msr_core::kd::{CityMemoryBank, KdModel};
use msr_core::model::{ModelConfig, MvModel};
use msr_core::train::seeded;
use msr_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSRCKPT1";
pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
    #[error("corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Full multi-view model.
    Mv,
    /// Memory-free network trained on its own.
    Student,
    /// Teacher and student trained together.
    Kd,
    /// A single exported memory matrix.
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: ModelKind,
    pub city: String,
    pub ablation: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub stats: Option<Standardizer>,
    pub tensors: Vec<TensorMeta>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(
        kind: ModelKind,
        city: &str,
        seed: u64,
        config: ModelConfig,
        stats: Option<Standardizer>,
        store: &ParamStore,
    ) -> Self {
        let (metas, tensors) = store
            .iter()
            .map(|(_, p)| {
                (
                    TensorMeta {
                        name: p.name.clone(),
                        rows: p.value.rows(),
                        cols: p.value.cols(),
                        trainable: p.trainable,
                    },
                    p.value.clone(),
                )
            })
            .unzip();
        Self {
            header: Header {
                format_version: FORMAT_VERSION,
                kind,
                city: city.into(),
                ablation: config.ablation.tag().into(),
                seed,
                config,
                stats,
                tensors: metas,
                meta: BTreeMap::new(),
            },
            tensors,
        }
    }

    pub fn memory(city: &str, seed: u64, config: ModelConfig, memory: &Tensor) -> Self {
        let mut store = ParamStore::new();
        store.add_frozen("memory", memory.clone());
        Self::from_store(ModelKind::Memory, city, seed, config, None, &store)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let floats: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let take = |from: usize, len: usize| {
            bytes.get(from..from + len).ok_or(CheckpointError::Truncated {
                needed: from + len,
                available: bytes.len(),
            })
        };
        let magic = take(0, 8)?;
        if magic != MAGIC {
            // a shared 7-byte prefix means a different format revision
            if magic[..7] == MAGIC[..7] {
                let v = (magic[7] as char).to_digit(10).unwrap_or(0);
                return Err(CheckpointError::BadVersion(v));
            }
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(take(8, 8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len)
            .map_err(|_| CheckpointError::Corrupt(format!("header length {len}")))?;
        let header: Header = serde_json::from_slice(take(16, len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(header.format_version));
        }
        let mut offset = 16 + len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let n = meta
                .rows
                .checked_mul(meta.cols)
                .filter(|&n| n > 0)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} has shape {}x{}", meta.name, meta.rows, meta.cols)))?;
            let raw = take(offset, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(meta.rows, meta.cols, data).expect("length checked"));
            offset += n * 8;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} bytes after the last tensor",
                bytes.len() - offset
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(crate::error::io(dir))?;
        }
        fs::write(path, self.encode()).map_err(crate::error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let wrap = |source| Error::Checkpoint {
            path: path.into(),
            source,
        };
        let bytes = fs::read(path).map_err(|e| wrap(e.into()))?;
        Self::decode(&bytes).map_err(wrap)
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Copies every tensor into a freshly built store whose layout must
    /// match the checkpoint name for name.
    fn restore(&self, store: &mut ParamStore) -> std::result::Result<(), CheckpointError> {
        if store.len() != self.tensors.len() {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for ((id, meta), t) in ids.into_iter().zip(&self.header.tensors).zip(&self.tensors) {
            let p = store.entry(id);
            if p.name != meta.name || p.value.shape() != t.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} {:?} does not match model parameter {} {:?}",
                    meta.name,
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *store.get_mut(id) = t.clone();
            store.set_trainable(id, meta.trainable);
        }
        Ok(())
    }

    fn stats(&self) -> std::result::Result<Standardizer, CheckpointError> {
        self.header
            .stats
            .clone()
            .ok_or_else(|| CheckpointError::Corrupt("model checkpoint without input statistics".into()))
    }

    /// Rebuilds the model a checkpoint was saved from.
    pub fn into_model(self) -> std::result::Result<Model, CheckpointError> {
        let config = self.header.config;
        let rebuild = |e: msr_core::Error| CheckpointError::Corrupt(e.to_string());
        let mut rng = seeded(0, 0);
        match self.header.kind {
            ModelKind::Mv | ModelKind::Student => {
                let stats = self.stats()?;
                let mut m = if self.header.kind == ModelKind::Mv {
                    MvModel::new(config, stats, &mut rng)
                } else {
                    MvModel::student(config, stats, &mut rng)
                }
                .map_err(rebuild)?;
                self.restore(&mut m.store)?;
                Ok(Model::Mv(m))
            }
            ModelKind::Kd => {
                let stats = self.stats()?;
                let entries = self
                    .header
                    .tensors
                    .iter()
                    .zip(&self.tensors)
                    .filter_map(|(m, t)| m.name.strip_prefix("bank.").map(|c| (c.to_string(), t.clone())))
                    .collect();
                let bank = CityMemoryBank::new(entries).map_err(rebuild)?;
                let mut m = KdModel::new(config, &bank, None, stats, &mut rng).map_err(rebuild)?;
                self.restore(&mut m.store)?;
                Ok(Model::Kd(Box::new(m)))
            }
            ModelKind::Memory => {
                let memory = self
                    .tensor("memory")
                    .ok_or_else(|| CheckpointError::Corrupt("memory file without a memory tensor".into()))?;
                Ok(Model::Memory(memory.clone()))
            }
        }
    }
}

/// A model restored from disk.
#[derive(Debug, Clone)]
pub enum Model {
    Mv(MvModel),
    Kd(Box<KdModel>),
    Memory(Tensor),
}

/// Which network of a restored model answers predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Mv,
    Teacher,
    Student,
}

impl Model {
    pub fn config(&self) -> Option<&ModelConfig> {
        match self {
            Model::Mv(m) => Some(m.config()),
            Model::Kd(m) => Some(m.config()),
            Model::Memory(_) => None,
        }
    }

    /// The branch used when none is requested: the student for
    /// distillation checkpoints, the network itself otherwise.
    pub fn default_branch(&self) -> Branch {
        match self {
            Model::Kd(_) => Branch::Student,
            _ => Branch::Mv,
        }
    }

    pub fn check_branch(&self, branch: Branch) -> Result<()> {
        let ok = match self {
            Model::Mv(m) => match branch {
                Branch::Mv => true,
                Branch::Student => !m.net.uses_memory(),
                Branch::Teacher => false,
            },
            Model::Kd(_) => branch != Branch::Mv,
            Model::Memory(_) => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("checkpoint has no {branch:?} model").to_lowercase()))
        }
    }

    pub fn predict(&self, branch: Branch, samples: &[msr_core::features::Sample]) -> Result<Vec<f64>> {
        self.check_branch(branch)?;
        Ok(match (self, branch) {
            (Model::Mv(m), _) => m.predict(samples)?,
            (Model::Kd(m), Branch::Teacher) => m.predict_teacher(samples)?,
            (Model::Kd(m), _) => m.predict_student(samples)?,
            (Model::Memory(_), _) => unreachable!("checked above"),
        })
    }
}
