use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.get(i).numel()]).collect();
        Self { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update and clears all gradients. Every parameter must
    /// carry a gradient; nothing is modified if one is missing.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.first_moment.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for i in 0..store.len() {
            let t = store.get(i);
            if t.grad().is_none() {
                return Err(TensorError::MissingGrad(store.name(i).to_string()));
            }
            if self.first_moment[i].len() != t.numel() {
                return Err(TensorError::Invalid(format!("moment shape mismatch for `{}`", store.name(i))));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let t = store.get_mut(i);
            let g = t.take_grad().expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = (0..store.len())
        .filter_map(|i| store.get(i).grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        store.scale_grad(max_norm / norm);
    }
    norm
}
