//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape and are bound onto it on first use, so a
//! tape can be dropped after `backward` while the store keeps accumulating.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with_floor, DEFAULT_REL_FLOOR};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::ParamStore;
pub use tape::{Gradients, LossKind, ParamKey, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: row {row} has no unmasked entry")]
    MaskedRow { op: &'static str, row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("variable belongs to tape {found}, expected tape {expected}")]
    ForeignVar { expected: u32, found: u32 },
    #[error("function is not finite at probe {probe} (value {value})")]
    NonFinite { probe: usize, value: f64 },
    #[error("{0}")]
    Invalid(String),
}
