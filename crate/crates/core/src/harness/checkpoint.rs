//! Binary checkpoints: magic, version, a JSON header indexing every tensor by
//! name, the little-endian f64 blob, and a SHA-256 trailer over all of it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, ParamStore, Tensor};
use crate::model::{AgentModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"CHDSTCKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = MAGIC.len() + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch: file is corrupted")]
    Checksum,
    #[error("checkpoint truncated: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Where a run's random streams stand. Every stream derives from
/// `(seed, iteration)`, so these two numbers restore all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub sr: f64,
    pub spl: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    model_config: Option<ModelConfig>,
    tensors: Vec<TensorEntry>,
    n_values: usize,
    optimizer: Option<OptimizerHeader>,
    rng: RngPosition,
    iteration: usize,
    best: Option<BestSummary>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// What the parameters belong to, e.g. `model` or `adapters`.
    pub kind: String,
    pub model_config: Option<ModelConfig>,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub rng: RngPosition,
    pub iteration: usize,
    pub best: Option<BestSummary>,
}

impl Checkpoint {
    pub fn of_model(model: &AgentModel, rng: RngPosition) -> Self {
        Self {
            kind: "model".into(),
            model_config: Some(model.config.clone()),
            params: model.params.clone(),
            optimizer: None,
            rng,
            iteration: rng.iteration,
            best: None,
        }
    }

    pub fn of_params(kind: &str, params: &ParamStore, rng: RngPosition) -> Self {
        Self {
            kind: kind.into(),
            model_config: None,
            params: params.clone(),
            optimizer: None,
            rng,
            iteration: rng.iteration,
            best: None,
        }
    }

    pub fn with_optimizer(mut self, opt: &AdamW) -> Self {
        self.optimizer = Some(opt.clone());
        self
    }

    pub fn with_best(mut self, best: BestSummary) -> Self {
        self.best = Some(best);
        self
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<AgentModel, CheckpointError> {
        let cfg = self
            .model_config
            .clone()
            .ok_or_else(|| CheckpointError::Format(format!("a `{}` checkpoint holds no model", self.kind)))?;
        let mut model = AgentModel::new(cfg, 0).map_err(|e| CheckpointError::Format(e.to_string()))?;
        copy_by_name(&self.params, &mut model.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.to_string(), offset, shape: t.shape().to_vec() });
            offset += t.numel();
        }
        let header = Header {
            kind: self.kind.clone(),
            model_config: self.model_config.clone(),
            tensors,
            n_values: offset,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, step: o.step }),
            rng: self.rng,
            iteration: self.iteration,
            best: self.best,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset * 24 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.params.flatten());
        if let Some(o) = &self.optimizer {
            o.first_moment.iter().for_each(|m| put(m));
            o.second_moment.iter().for_each(|v| put(v));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(CheckpointError::Truncated { expected: PREFIX_LEN + DIGEST_LEN, got: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = PREFIX_LEN.checked_add(header_len).filter(|&e| e + DIGEST_LEN <= bytes.len()).ok_or(
            CheckpointError::Truncated { expected: PREFIX_LEN.saturating_add(header_len) + DIGEST_LEN, got: bytes.len() },
        )?;
        let header: Header = match serde_json::from_slice(&bytes[PREFIX_LEN..header_end]) {
            Ok(h) => h,
            Err(e) => {
                verify_digest(bytes)?;
                return Err(CheckpointError::Format(e.to_string()));
            }
        };
        let blocks = if header.optimizer.is_some() { 3 } else { 1 };
        let expected = header_end + header.n_values * 8 * blocks + DIGEST_LEN;
        if bytes.len() != expected {
            verify_digest(bytes)?;
            return Err(CheckpointError::Truncated { expected, got: bytes.len() });
        }
        verify_digest(bytes)?;
        let values: Vec<f64> = bytes[header_end..bytes.len() - DIGEST_LEN]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut params = ParamStore::new();
        let mut expect_offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expect_offset || e.offset + n > header.n_values {
                return Err(CheckpointError::Format(format!("tensor `{}` has a bad offset", e.name)));
            }
            if params.index_of(&e.name).is_some() {
                return Err(CheckpointError::Format(format!("tensor `{}` appears twice", e.name)));
            }
            let t = Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())
                .map_err(|err| CheckpointError::Format(err.to_string()))?;
            params.add(e.name.clone(), t);
            expect_offset += n;
        }
        if expect_offset != header.n_values {
            return Err(CheckpointError::Format("index does not cover the blob".into()));
        }
        let optimizer = header.optimizer.map(|o| {
            let split = |block: usize| {
                header
                    .tensors
                    .iter()
                    .map(|e| {
                        let start = block * header.n_values + e.offset;
                        values[start..start + e.shape.iter().product::<usize>()].to_vec()
                    })
                    .collect()
            };
            AdamW { config: o.config, step: o.step, first_moment: split(1), second_moment: split(2) }
        });
        Ok(Self {
            kind: header.kind,
            model_config: header.model_config,
            params,
            optimizer,
            rng: header.rng,
            iteration: header.iteration,
            best: header.best,
        })
    }
}

fn verify_digest(bytes: &[u8]) -> Result<(), CheckpointError> {
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    Ok(())
}

/// Copies every tensor of `dst` from the same-named tensor of `src`. Either
/// all tensors are copied or `dst` is left untouched.
pub fn copy_by_name(src: &ParamStore, dst: &mut ParamStore) -> Result<(), CheckpointError> {
    if src.len() != dst.len() {
        return Err(CheckpointError::Format(format!("checkpoint has {} tensors, target {}", src.len(), dst.len())));
    }
    let mut plan = Vec::with_capacity(dst.len());
    for i in 0..dst.len() {
        let name = dst.name(i);
        let j = src.index_of(name).ok_or_else(|| CheckpointError::Format(format!("missing tensor `{name}`")))?;
        if src.get(j).shape() != dst.get(i).shape() {
            return Err(CheckpointError::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                src.get(j).shape(),
                dst.get(i).shape()
            )));
        }
        plan.push((i, j));
    }
    for (i, j) in plan {
        dst.get_mut(i).data_mut().copy_from_slice(src.get(j).data());
    }
    Ok(())
}

/// Writes through a temporary file so readers never see a partial checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&fs::read(path)?)
}
