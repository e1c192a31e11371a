//! Per-ability knowledge transfer losses between a teacher and a student.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::model::layers::{Builder, Ctx, Linear};
use crate::model::{Ability, MetaKnowledge};
use crate::seed;

#[derive(Debug, Error)]
pub enum MakdError {
    #[error("{ability:?} transfer at step {step}: {detail}")]
    Shape { ability: Ability, step: usize, detail: String },
    #[error("no adapter for {ability:?} features of dims {student} -> {teacher}")]
    MissingAdapter { ability: Ability, student: usize, teacher: usize },
    #[error("mirrored action sets differ at step {step}: teacher {teacher}, student {student}")]
    Mirroring { step: usize, teacher: usize, student: usize },
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which abilities transfer knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbilityFlags {
    pub v: bool,
    pub t: bool,
    pub l: bool,
    pub g: bool,
    pub b: bool,
}

impl AbilityFlags {
    pub const ALL: Self = Self { v: true, t: true, l: true, g: true, b: true };
    pub const NONE: Self = Self { v: false, t: false, l: false, g: false, b: false };

    pub fn get(&self, a: Ability) -> bool {
        match a {
            Ability::Visual => self.v,
            Ability::Text => self.t,
            Ability::Local => self.l,
            Ability::Global => self.g,
            Ability::Behavior => self.b,
        }
    }

    pub fn with(mut self, a: Ability, on: bool) -> Self {
        match a {
            Ability::Visual => self.v = on,
            Ability::Text => self.t = on,
            Ability::Local => self.l = on,
            Ability::Global => self.g = on,
            Ability::Behavior => self.b = on,
        }
        self
    }
}

/// Which kinds of transfer loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossKinds {
    pub attention: bool,
    pub feature: bool,
    pub logit: bool,
}

impl LossKinds {
    pub const ALL: Self = Self { attention: true, feature: true, logit: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Attenuation of the per-sample transfer weight by teacher uncertainty.
    pub beta: f64,
    pub tau_logit: f64,
    pub abilities: AbilityFlags,
    pub kinds: LossKinds,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { beta: 0.7, tau_logit: 2.0, abilities: AbilityFlags::ALL, kinds: LossKinds::ALL }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), MakdError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(MakdError::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.tau_logit > 0.0 && self.tau_logit.is_finite()) {
            return Err(MakdError::Config(format!("tau_logit {} must be positive", self.tau_logit)));
        }
        Ok(())
    }
}

/// Learnable affine map from student feature space to teacher feature space.
#[derive(Debug, Clone)]
pub struct ProjectionAdapter {
    pub student_dim: usize,
    pub teacher_dim: usize,
    linear: Linear,
}

/// One adapter per representation ability (visual, text, local, global),
/// sharing a parameter store so a single optimizer trains them.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub params: ParamStore,
    pub student_dim: usize,
    pub teacher_dim: usize,
    adapters: Vec<Option<ProjectionAdapter>>,
}

const REPRESENTATION: [Ability; 4] = [Ability::Visual, Ability::Text, Ability::Local, Ability::Global];

fn slot(a: Ability) -> Option<usize> {
    REPRESENTATION.iter().position(|r| *r == a)
}

impl AdapterSet {
    /// Randomly initialized adapters when the dims differ, none when they match.
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut adapters = vec![None; REPRESENTATION.len()];
        if student_dim != teacher_dim {
            let mut rng = seed::rng(seed);
            let mut b = Builder { store: &mut params, rng: &mut rng };
            for (i, a) in REPRESENTATION.iter().enumerate() {
                let linear = Linear::new(&mut b, &format!("adapter.{}", a.symbol()), student_dim, teacher_dim);
                adapters[i] = Some(ProjectionAdapter { student_dim, teacher_dim, linear });
            }
        }
        Self { params, student_dim, teacher_dim, adapters }
    }

    /// Explicit identity adapters with zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut params = ParamStore::new();
        let adapters = REPRESENTATION
            .iter()
            .map(|a| {
                let w = params.add(format!("adapter.{}.w", a.symbol()), Tensor::identity(dim));
                let b = params.add(format!("adapter.{}.b", a.symbol()), Tensor::zeros(vec![dim]));
                Some(ProjectionAdapter { student_dim: dim, teacher_dim: dim, linear: Linear { w, b } })
            })
            .collect();
        Self { params, student_dim: dim, teacher_dim: dim, adapters }
    }

    pub fn get(&self, a: Ability) -> Option<&ProjectionAdapter> {
        slot(a).and_then(|i| self.adapters[i].as_ref())
    }

    /// Maps a student feature into teacher space; passes it through when no
    /// adapter is needed.
    pub fn project(&self, tape: &mut Tape, a: Ability, x: Var, trainable: bool) -> Result<Var, MakdError> {
        let dim = *tape.shape(x).last().unwrap_or(&0);
        match self.get(a) {
            Some(ad) => {
                if dim != ad.student_dim {
                    return Err(MakdError::Shape {
                        ability: a,
                        step: 0,
                        detail: format!("feature dim {dim} for adapter expecting {}", ad.student_dim),
                    });
                }
                let mut ctx = Ctx::new(tape, &self.params, trainable);
                Ok(ad.linear.forward(&mut ctx, x)?)
            }
            None if self.student_dim == self.teacher_dim => Ok(x),
            None => Err(MakdError::MissingAdapter { ability: a, student: self.student_dim, teacher: self.teacher_dim }),
        }
    }
}

/// Mean squared difference of two attention maps. The teacher side is detached.
pub fn attn_transfer_loss(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    ability: Ability,
    step: usize,
) -> Result<Var, MakdError> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(MakdError::Shape {
            ability,
            step,
            detail: format!("attention {:?} vs {:?}", tape.shape(teacher), tape.shape(student)),
        });
    }
    let t = tape.detach(teacher)?;
    Ok(tape.mse(student, t)?)
}

/// Mean squared error between the teacher feature and the adapted student feature.
pub fn feat_transfer_loss(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    adapters: &AdapterSet,
    adapters_trainable: bool,
    ability: Ability,
    step: usize,
) -> Result<Var, MakdError> {
    let projected = adapters.project(tape, ability, student, adapters_trainable).map_err(|e| match e {
        MakdError::Shape { ability, detail, .. } => MakdError::Shape { ability, step, detail },
        other => other,
    })?;
    if tape.shape(teacher) != tape.shape(projected) {
        return Err(MakdError::Shape {
            ability,
            step,
            detail: format!("feature {:?} vs adapted {:?}", tape.shape(teacher), tape.shape(projected)),
        });
    }
    let t = tape.detach(teacher)?;
    Ok(tape.mse(projected, t)?)
}

/// `τ²·KL(softmax(teacher/τ) ‖ softmax(student/τ))`, teacher detached.
pub fn logit_transfer_loss(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    tau: f64,
    step: usize,
) -> Result<Var, MakdError> {
    let (nt, ns) = (tape.shape(teacher).to_vec(), tape.shape(student).to_vec());
    if nt != ns {
        return Err(MakdError::Mirroring { step, teacher: *nt.last().unwrap_or(&0), student: *ns.last().unwrap_or(&0) });
    }
    Ok(tape.kl_temperature(student, teacher, tau)?)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AbilityLoss {
    pub attn: Option<Var>,
    pub feat: Option<Var>,
}

/// Transfer losses of one mirrored step. Disabled entries are `None` and count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct AbilityLossSet {
    pub v: AbilityLoss,
    pub t: AbilityLoss,
    pub l: AbilityLoss,
    pub g: AbilityLoss,
    /// Logit loss of the behavior ability.
    pub b: Option<Var>,
}

impl AbilityLossSet {
    pub fn representation(&self, a: Ability) -> Option<&AbilityLoss> {
        match a {
            Ability::Visual => Some(&self.v),
            Ability::Text => Some(&self.t),
            Ability::Local => Some(&self.l),
            Ability::Global => Some(&self.g),
            Ability::Behavior => None,
        }
    }

    fn representation_mut(&mut self, a: Ability) -> &mut AbilityLoss {
        match a {
            Ability::Visual => &mut self.v,
            Ability::Text => &mut self.t,
            Ability::Local => &mut self.l,
            Ability::Global => &mut self.g,
            Ability::Behavior => unreachable!("behavior has no representation loss"),
        }
    }

    /// `L_i` for each ability in `Ability::ALL` order.
    pub fn per_ability(&self, tape: &mut Tape) -> Result<Vec<Option<Var>>, MakdError> {
        let mut out = Vec::with_capacity(Ability::ALL.len());
        for a in Ability::ALL {
            let parts: Vec<Var> = match self.representation(a) {
                Some(r) => r.attn.into_iter().chain(r.feat).collect(),
                None => self.b.into_iter().collect(),
            };
            out.push(match parts.as_slice() {
                [] => None,
                [one] => Some(*one),
                [x, y] => Some(tape.add(*x, *y)?),
                _ => unreachable!(),
            });
        }
        Ok(out)
    }

    /// Scalar value of each `L_i`, zero when disabled.
    pub fn values(&self, tape: &Tape) -> [f64; 5] {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        let r = |l: &AbilityLoss| v(l.attn) + v(l.feat);
        [r(&self.v), r(&self.t), r(&self.l), r(&self.g), v(self.b)]
    }
}

/// All enabled transfer losses between two mirrored steps.
#[allow(clippy::too_many_arguments)]
pub fn makd_losses(
    tape: &mut Tape,
    teacher: &MetaKnowledge,
    student: &MetaKnowledge,
    adapters: &AdapterSet,
    adapters_trainable: bool,
    config: &DistillConfig,
    step: usize,
) -> Result<AbilityLossSet, MakdError> {
    let mut set = AbilityLossSet::default();
    for a in Ability::ALL {
        if !config.abilities.get(a) {
            continue;
        }
        match (teacher.representation(a), student.representation(a)) {
            (Some(t), Some(s)) => {
                let slot = set.representation_mut(a);
                if config.kinds.attention {
                    slot.attn = Some(attn_transfer_loss(tape, t.attn, s.attn, a, step)?);
                }
                if config.kinds.feature {
                    slot.feat = Some(feat_transfer_loss(tape, t.feat, s.feat, adapters, adapters_trainable, a, step)?);
                }
            }
            _ => {
                if config.kinds.logit {
                    set.b = Some(logit_transfer_loss(tape, teacher.behavior, student.behavior, config.tau_logit, step)?);
                }
            }
        }
    }
    Ok(set)
}

/// `α·kd + (1−α)·ce`.
pub fn total_student_loss(tape: &mut Tape, kd: Var, ce: Var, alpha: f64) -> Result<Var, MakdError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MakdError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let k = tape.scale(kd, alpha)?;
    let c = tape.scale(ce, 1.0 - alpha)?;
    Ok(tape.add(k, c)?)
}

#[cfg(test)]
mod tests;
