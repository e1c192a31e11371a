//! Experiment configuration: a TOML document overlaid on fully materialized
//! defaults. Keys absent from the defaults are rejected.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::HarnessError;
use crate::env::{Benchmark, BenchmarkParams};
use crate::icod::{check_stage_pair, ChainConfig, ChainSpec};
use crate::model::{ModelConfig, ModelSize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for model initialization, batches, noise and weight draws.
    pub seed: u64,
    pub output_dir: String,
    pub benchmark: BenchmarkParams,
    /// Model sizes from largest to smallest; the first is the teacher.
    pub ladder: Vec<ModelSize>,
    pub chain: ChainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            benchmark: BenchmarkParams::default(),
            ladder: vec![ModelSize::L, ModelSize::M, ModelSize::S],
            chain: ChainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `src` over the defaults. Errors carry the offending line when known.
    pub fn parse(src: &str) -> Result<Self, HarnessError> {
        let user: Table = src.parse().map_err(|e: toml::de::Error| HarnessError::Config {
            line: e.span().map(|s| line_of_offset(src, s.start)),
            msg: e.message().to_string(),
        })?;
        let defaults = Value::try_from(Self::default()).expect("defaults serialize");
        let Value::Table(mut merged) = defaults else { unreachable!("config is a table") };
        overlay(&mut merged, user, &mut Vec::new(), src)?;
        let cfg: Self = Value::Table(merged).try_into().map_err(|e: toml::de::Error| HarnessError::Config {
            line: None,
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The same experiment with another master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, chain: ChainConfig { seed, ..self.chain }, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |msg: String| HarnessError::Config { line: None, msg };
        if self.ladder.is_empty() {
            return Err(err("ladder must name at least one model size".into()));
        }
        self.chain.teacher.validate().map_err(|e| err(e.to_string()))?;
        self.chain.distill.validate().map_err(|e| err(e.to_string()))?;
        self.chain.cotrain.validate().map_err(|e| err(e.to_string()))?;
        self.chain.makd.validate().map_err(|e| err(e.to_string()))?;
        self.chain.weighting.validate().map_err(|e| err(e.to_string()))?;
        self.chain_spec()?;
        Ok(())
    }

    /// Non-fatal findings, such as a co-training learning rate that is not lowered.
    pub fn warnings(&self) -> Vec<String> {
        check_stage_pair(&self.chain.distill, &self.chain.cotrain)
    }

    pub fn model_config(&self, size: ModelSize) -> ModelConfig {
        let b = &self.benchmark;
        let vocab = crate::env::Vocabulary::new(b.scene.n_landmarks).size();
        ModelConfig::sized(size, vocab, b.d_obs, b.episode.max_instruction_len)
    }

    pub fn chain_spec(&self) -> Result<ChainSpec, HarnessError> {
        ChainSpec::new(self.ladder.iter().map(|&s| self.model_config(s)).collect())
            .map_err(|e| HarnessError::Config { line: None, msg: e.to_string() })
    }

    /// The chain settings with the master seed applied.
    pub fn resolved_chain(&self) -> ChainConfig {
        ChainConfig { seed: self.seed, ..self.chain }
    }

    pub fn benchmark(&self) -> Result<Benchmark, HarnessError> {
        Ok(Benchmark::generate(&self.benchmark)?)
    }

    /// Sets a dotted key to a value written in TOML syntax, e.g.
    /// `chain.makd.beta` = `0.3`. The key must already exist.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), HarnessError> {
        let value: Value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let mut doc = Table::new();
        let parts: Vec<&str> = key.split('.').collect();
        let mut cursor = &mut doc;
        for p in &parts[..parts.len() - 1] {
            cursor = cursor
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("fresh table");
        }
        cursor.insert(parts[parts.len() - 1].to_string(), value);
        let Value::Table(mut merged) = Value::try_from(&*self).expect("config serializes") else { unreachable!() };
        overlay(&mut merged, doc, &mut Vec::new(), "")?;
        let cfg: Self = Value::Table(merged).try_into().map_err(|e: toml::de::Error| HarnessError::Config {
            line: None,
            msg: format!("{key} = {raw}: {}", e.message()),
        })?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of `path` in `src`: the `[table]` header or `key =` line inside it.
fn locate(src: &str, path: &[String]) -> Option<usize> {
    let mut section: Vec<String> = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            section = h.trim_matches(['[', ']']).split('.').map(|s| s.trim().to_string()).collect();
            if section == path {
                return Some(i + 1);
            }
            continue;
        }
        if let Some((k, _)) = t.split_once('=') {
            let mut full = section.clone();
            full.extend(k.trim().split('.').map(|s| s.trim().trim_matches('"').to_string()));
            if full == path {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Writes `user` into `base`. Tables merge recursively; a table carrying a
/// `kind` tag replaces its default wholesale, since its fields depend on it.
fn overlay(base: &mut Table, user: Table, path: &mut Vec<String>, src: &str) -> Result<(), HarnessError> {
    for (k, v) in user {
        path.push(k.clone());
        let Some(slot) = base.get_mut(&k) else {
            return Err(HarnessError::Config { line: locate(src, path), msg: format!("unknown key `{}`", path.join(".")) });
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(u)) if !u.contains_key("kind") => overlay(b, u, path, src)?,
            (slot, v) => {
                if slot.is_table() != v.is_table() {
                    return Err(HarnessError::Config {
                        line: locate(src, path),
                        msg: format!("`{}` expects a {}", path.join("."), slot.type_str()),
                    });
                }
                *slot = v;
            }
        }
        path.pop();
    }
    Ok(())
}
