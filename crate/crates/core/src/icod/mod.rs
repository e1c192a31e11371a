//! Staged training: teacher training, student distillation, interactive
//! co-training, and chained compression down a size ladder.

mod chain;
mod rollout;
mod train;

pub use chain::{continue_chain, run_chain, ChainConfig, ChainReport, ChainSpec, StageOutcome};
pub use rollout::{
    evaluate, oracle_action, rollout_mirrored, rollout_supervised, EvalConfig, MirroredStep, Participant, Rollout,
    SupervisedRollout,
};
pub use train::{
    cotrain, distill_student, iterate, run_stage, train_teacher, validate, AdapterLearner, Job, Learner, TrainerState,
};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, TensorError};
use crate::env::EnvError;
use crate::makd::MakdError;
use crate::metrics::{MetricsError, MetricsSummary};
use crate::model::ModelError;
use crate::weighting::WeightingError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("{stage} diverged at iteration {iteration}: loss {loss} ({detail})")]
    Divergence { stage: Stage, iteration: usize, loss: f64, detail: String },
    #[error("mirroring broken at step {step}: {detail}")]
    Mirroring { step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Makd(#[from] MakdError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
    S4,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Who picks the executed action during a training rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// The learner executes its own argmax; the oracle only supervises.
    StudentForced,
    /// The oracle action is executed.
    OracleForced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    pub max_iters: usize,
    pub val_interval: usize,
    /// Transfer-loss share when distilling a student.
    pub alpha: f64,
    /// Transfer-loss share on co-training batches that update the teacher.
    pub alpha_t: f64,
    /// Transfer-loss share on co-training batches that update the student.
    pub alpha_s: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: Policy,
    /// Leading iterations rolled out oracle-forced regardless of `policy`.
    pub warmup_iters: usize,
    /// Global gradient-norm clip per parameter group; 0 disables.
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn teacher() -> Self {
        Self {
            stage: Stage::S1,
            lr: 3e-4,
            max_iters: 5000,
            val_interval: 250,
            alpha: 0.0,
            alpha_t: 0.2,
            alpha_s: 0.5,
            batch_size: 1,
            seed: 0,
            policy: Policy::StudentForced,
            warmup_iters: 2000,
            clip_norm: 5.0,
            weight_decay: 0.0,
        }
    }

    pub fn distill() -> Self {
        Self { stage: Stage::S2, lr: 1e-3, val_interval: 500, alpha: 0.5, ..Self::teacher() }
    }

    /// Co-training after `s2`: a fifth of the learning rate, half the
    /// validation interval, no warmup.
    pub fn cotrain_after(s2: &StageConfig) -> Self {
        Self {
            stage: Stage::S3,
            lr: s2.lr / 5.0,
            max_iters: 1000,
            val_interval: (s2.val_interval / 2).max(1),
            warmup_iters: 0,
            ..*s2
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.val_interval == 0 {
            return bad("val_interval must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("alpha_t", self.alpha_t), ("alpha_s", self.alpha_s)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.clip_norm >= 0.0 && self.weight_decay >= 0.0) {
            return bad("clip_norm and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub(crate) fn policy_at(&self, iteration: usize) -> Policy {
        if iteration < self.warmup_iters {
            Policy::OracleForced
        } else {
            self.policy
        }
    }
}

/// Warnings for a co-training config that does not lower the learning rate.
pub fn check_stage_pair(s2: &StageConfig, s3: &StageConfig) -> Vec<String> {
    let mut out = Vec::new();
    if s3.lr >= s2.lr {
        out.push(format!("co-training lr {} is not below distillation lr {}", s3.lr, s2.lr));
    }
    if s3.val_interval > s2.val_interval {
        out.push(format!(
            "co-training validation interval {} exceeds distillation interval {}",
            s3.val_interval, s2.val_interval
        ));
    }
    out
}

/// One validation line of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub iteration: usize,
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub osr: f64,
    pub n_episodes: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(split: &str, iteration: usize, seed: u64, m: &MetricsSummary) -> Self {
        Self {
            split: split.to_string(),
            iteration,
            sr: m.sr,
            spl: m.spl,
            ne: m.ne,
            osr: m.osr,
            n_episodes: m.n_episodes,
            seed,
        }
    }
}

/// Best parameters seen so far, ranked by unseen SR then SPL.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BestTracker {
    pub sr: f64,
    pub spl: f64,
    pub iteration: usize,
    pub params: Option<Vec<f64>>,
}

impl BestTracker {
    /// Keeps `params` when `(sr, spl)` is strictly better. Returns whether it did.
    pub fn offer(&mut self, iteration: usize, sr: f64, spl: f64, params: &ParamStore) -> bool {
        let better = self.params.is_none() || sr > self.sr || (sr == self.sr && spl > self.spl);
        if better {
            *self = Self { sr, spl, iteration, params: Some(params.flatten()) };
        }
        better
    }
}

/// Everything one stage produced besides the models.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageReport {
    pub stage: Option<Stage>,
    /// Mean training loss per iteration.
    pub losses: Vec<f64>,
    /// Validation records per model name.
    pub metrics: BTreeMap<String, Vec<MetricsRecord>>,
}

impl StageReport {
    pub fn last(&self, model: &str, split: &str) -> Option<&MetricsRecord> {
        self.metrics.get(model)?.iter().rev().find(|r| r.split == split)
    }
}
