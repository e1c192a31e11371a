//! Navigation agent with visual, text, local, global and behavior abilities.

mod agent;
pub mod layers;
mod scaling;
mod state;

pub use agent::{
    Ability, AbilityOutput, AgentModel, GlobalOutput, LocalOutput, MetaKnowledge, StepOutput, TextEncoding,
    VisualEncoding,
};
pub use scaling::{flops_count, param_count};
pub use state::{Action, MemoryEntry, NavState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    OutOfVocab { token: usize, vocab: usize },
    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named widths of the size ladder, largest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSize {
    L,
    B,
    M,
    S,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] = [ModelSize::L, ModelSize::B, ModelSize::M, ModelSize::S];

    pub fn hidden(self) -> usize {
        match self {
            ModelSize::L => 64,
            ModelSize::B => 32,
            ModelSize::M => 24,
            ModelSize::S => 16,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "L" | "l" => Some(ModelSize::L),
            "B" | "b" => Some(ModelSize::B),
            "M" | "m" => Some(ModelSize::M),
            "S" | "s" => Some(ModelSize::S),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub text_layers: usize,
    pub pano_layers: usize,
    pub cross_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub obs_dim: usize,
    pub max_text_len: usize,
    /// Maximum number of decisions per episode.
    pub horizon: usize,
}

impl ModelConfig {
    pub fn sized(size: ModelSize, vocab_size: usize, obs_dim: usize, max_text_len: usize) -> Self {
        Self {
            hidden: size.hidden(),
            text_layers: 2,
            pano_layers: 1,
            cross_layers: 2,
            heads: 4,
            vocab_size,
            obs_dim,
            max_text_len,
            horizon: 15,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("hidden", self.hidden),
            ("text_layers", self.text_layers),
            ("pano_layers", self.pano_layers),
            ("cross_layers", self.cross_layers),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("obs_dim", self.obs_dim),
            ("max_text_len", self.max_text_len),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}
