//! Ability-level loss weights (random, equal, learned, gradient-adjusted)
//! and uncertainty-based per-sample weights.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, ParamStore, Tape, Tensor, TensorError, Var};

/// Floor on the teacher's probability of the true action before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;
const GRAD_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum WeightingError {
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error("gradient-adjusted weights need per-ability gradient norms")]
    MissingGradients,
    #[error("invalid weighting parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeightingStrategy {
    Mkrw {
        #[serde(default = "default_k")]
        k: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Equal,
    Learned,
    GradAdjust,
}

fn default_k() -> f64 {
    5.0
}

fn default_tau() -> f64 {
    4.0
}

impl Default for WeightingStrategy {
    fn default() -> Self {
        WeightingStrategy::Mkrw { k: default_k(), tau: default_tau() }
    }
}

impl WeightingStrategy {
    pub fn validate(&self) -> Result<(), WeightingError> {
        if let WeightingStrategy::Mkrw { k, tau } = *self {
            if !(k > 0.0 && tau > 0.0) {
                return Err(WeightingError::Invalid(format!("need K > 0 and τ > 0, got K={k}, τ={tau}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingStrategy::Mkrw { .. } => "mkrw",
            WeightingStrategy::Equal => "equal",
            WeightingStrategy::Learned => "learned",
            WeightingStrategy::GradAdjust => "gradadjust",
        }
    }
}

/// Per-ability multipliers λ for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferWeights(pub Vec<f64>);

/// Per-sample multipliers γ.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights(pub Vec<f64>);

/// `λᵢ = K·softmax(λ̃/τ)ᵢ` with `λ̃ᵢ` i.i.d. standard normal.
pub fn sample_mkrw<R: Rng>(rng: &mut R, m: usize, k: f64, tau: f64) -> TransferWeights {
    let raw: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal) / tau).collect();
    TransferWeights(kernels::softmax(&raw).into_iter().map(|p| k * p).collect())
}

/// `−Σ aᵢ·log pᵢ` for a one-hot (or soft) target `a`, with `pᵢ` floored at [`PROB_FLOOR`].
pub fn teacher_uncertainty(target: &[f64], probs: &[f64]) -> f64 {
    target.iter().zip(probs).filter(|(a, _)| **a != 0.0).map(|(a, p)| -a * p.max(PROB_FLOOR).ln()).sum()
}

/// `γ = exp(−β·U)`.
pub fn transfer_weight(u: f64, beta: f64) -> f64 {
    (-beta * u).exp()
}

/// Mean over samples of `Σᵢ λᵢ·γₙ·Lᵢ,ₙ`. Missing entries count as zero; λ and
/// γ are constants.
pub fn combine(
    tape: &mut Tape,
    samples: &[Vec<Option<Var>>],
    lambda: &TransferWeights,
    gamma: &SampleWeights,
) -> Result<Var, WeightingError> {
    let lam: Vec<Var> = lambda.0.iter().map(|&l| tape.constant(Tensor::scalar(l))).collect();
    combine_with(tape, samples, &lam, gamma)
}

/// [`combine`] with λ given as tape values, which may carry gradients.
pub fn combine_with(
    tape: &mut Tape,
    samples: &[Vec<Option<Var>>],
    lambda: &[Var],
    gamma: &SampleWeights,
) -> Result<Var, WeightingError> {
    if samples.is_empty() {
        return Err(WeightingError::Mismatch { what: "samples", expected: 1, got: 0 });
    }
    if gamma.0.len() != samples.len() {
        return Err(WeightingError::Mismatch { what: "sample weights", expected: samples.len(), got: gamma.0.len() });
    }
    let mut terms = Vec::new();
    for (row, &g) in samples.iter().zip(&gamma.0) {
        if row.len() != lambda.len() {
            return Err(WeightingError::Mismatch { what: "ability weights", expected: row.len(), got: lambda.len() });
        }
        for (l, &w) in row.iter().zip(lambda) {
            if let Some(l) = l {
                let t = tape.scale_by(*l, w)?;
                terms.push(tape.scale(t, g)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let joined = tape.concat(&terms, 1)?;
    let total = tape.sum(joined)?;
    Ok(tape.scale(total, 1.0 / samples.len() as f64)?)
}

/// Weights of the non-random baselines. `grad_norms` holds, per ability, the
/// gradient norm of that ability's final layer.
pub fn baseline_weights(
    strategy: &WeightingStrategy,
    m: usize,
    grad_norms: Option<&[f64]>,
) -> Result<TransferWeights, WeightingError> {
    match strategy {
        WeightingStrategy::Equal => Ok(TransferWeights(vec![1.0; m])),
        WeightingStrategy::GradAdjust => {
            let norms = grad_norms.ok_or(WeightingError::MissingGradients)?;
            if norms.len() != m {
                return Err(WeightingError::Mismatch { what: "gradient norms", expected: m, got: norms.len() });
            }
            let inv: Vec<f64> = norms.iter().map(|n| 1.0 / (n + GRAD_EPS)).collect();
            let total: f64 = inv.iter().sum();
            Ok(TransferWeights(inv.iter().map(|w| w * m as f64 / total).collect()))
        }
        other => Err(WeightingError::Invalid(format!("{} weights are not a fixed baseline", other.name()))),
    }
}

/// `M` learnable scalars mapped through softplus to non-negative weights.
#[derive(Debug, Clone)]
pub struct LearnedWeights {
    pub params: ParamStore,
}

impl LearnedWeights {
    pub fn new<R: Rng>(m: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let raw = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.add("weights.raw", Tensor::vector(raw));
        Self { params }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>, WeightingError> {
        let raw = self.params.bind(tape, 0, trainable);
        let w = tape.softplus(raw)?;
        let m = tape.shape(w)[0];
        let col = tape.reshape(w, vec![m, 1])?;
        (0..m).map(|i| Ok(tape.embed_lookup(col, &[i])?)).collect()
    }

    pub fn values(&self) -> TransferWeights {
        TransferWeights(self.params.get(0).data().iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect())
    }
}

#[cfg(test)]
mod tests;
