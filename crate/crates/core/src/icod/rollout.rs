use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Policy, TrainError};
use crate::autodiff::{Tape, Var};
use crate::env::{observe, Episode, ObservationModel, Pose, SceneGraph, Split};
use crate::metrics::{aggregate, EpisodeResult, MetricsSummary, DEFAULT_THRESHOLD};
use crate::model::{Action, AgentModel, NavState, StepOutput};
use crate::seed;

/// Next node on the current shortest path to the goal, or stop at the goal.
pub fn oracle_action(scene: &SceneGraph, node: usize, goal: usize) -> Action {
    if node == goal {
        return Action::Stop;
    }
    Action::Goto(scene.shortest_path(node, goal).0[1])
}

/// A model taking part in a rollout.
#[derive(Debug, Clone, Copy)]
pub struct Participant<'a> {
    pub model: &'a AgentModel,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct MirroredStep {
    pub pose: Pose,
    pub actions: Vec<Action>,
    /// Index of the oracle action in `actions`.
    pub oracle: usize,
    /// Index of the executed action in `actions`.
    pub chosen: usize,
    /// One output per participant, in participant order.
    pub outputs: Vec<StepOutput>,
}

impl MirroredStep {
    pub fn oracle_target(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.actions.len()];
        t[self.oracle] = 1.0;
        t
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<MirroredStep>,
    /// Every node occupied, starting at the start node.
    pub trajectory: Vec<usize>,
    pub stopped: bool,
}

impl Rollout {
    pub fn horizon_reached(&self) -> bool {
        !self.stopped
    }
}

/// Runs several models along one trajectory. The `driver` (or the oracle,
/// under oracle-forcing) chooses each action; every other participant sees
/// the same pose and panorama and must score the same action set.
#[allow(clippy::too_many_arguments)]
pub fn rollout_mirrored<R: Rng>(
    tape: &mut Tape,
    parts: &[Participant<'_>],
    driver: usize,
    scene: &SceneGraph,
    obs_model: &ObservationModel,
    ep: &Episode,
    policy: Policy,
    rng: &mut R,
) -> Result<Rollout, TrainError> {
    if driver >= parts.len() {
        return Err(TrainError::Config(format!("driver {driver} of {} participants", parts.len())));
    }
    let horizon = parts.iter().map(|p| p.model.config.horizon).min().unwrap_or(0);
    let texts = parts
        .iter()
        .map(|p| p.model.encode_text(tape, p.trainable, &ep.instruction, &ep.positions))
        .collect::<Result<Vec<_>, _>>()?;
    let start = Pose { node: ep.start, heading: ep.start_heading };
    let mut states: Vec<NavState> = parts.iter().map(|_| NavState::new(start)).collect();
    let mut steps = Vec::new();
    while !states[driver].stopped && states[driver].step < horizon {
        let pose = states[driver].pose;
        let pano = observe(scene, obs_model, pose.node, pose.heading, rng)?;
        let mut outputs = Vec::with_capacity(parts.len());
        for ((p, state), text) in parts.iter().zip(&mut states).zip(&texts) {
            outputs.push(p.model.step(tape, p.trainable, scene, state, &pano, text)?);
        }
        let actions = outputs[driver].actions.clone();
        for (i, o) in outputs.iter().enumerate() {
            if o.actions != actions {
                return Err(TrainError::Mirroring {
                    step: steps.len(),
                    detail: format!("participant {i} scores {} actions, driver {}", o.actions.len(), actions.len()),
                });
            }
        }
        let oracle_action = oracle_action(scene, pose.node, ep.goal);
        let oracle = outputs[driver].action_index(oracle_action).ok_or_else(|| TrainError::Mirroring {
            step: steps.len(),
            detail: format!("oracle action {oracle_action:?} missing from the action set"),
        })?;
        let chosen = match policy {
            Policy::OracleForced => oracle,
            Policy::StudentForced => outputs[driver].action_index(outputs[driver].greedy()).expect("greedy is scored"),
        };
        for state in &mut states {
            state.apply(scene, actions[chosen])?;
        }
        if let Some(i) = states.iter().position(|s| s.pose != states[driver].pose) {
            return Err(TrainError::Mirroring { step: steps.len(), detail: format!("participant {i} left the driver's path") });
        }
        steps.push(MirroredStep { pose, actions, oracle, chosen, outputs });
    }
    let state = states.swap_remove(driver);
    Ok(Rollout { steps, trajectory: state.trajectory, stopped: state.stopped })
}

/// A single-model rollout with oracle cross-entropy at every step.
#[derive(Debug, Clone)]
pub struct SupervisedRollout {
    pub rollout: Rollout,
    pub ce: Vec<Var>,
    /// Mean of `ce` over steps.
    pub loss: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn rollout_supervised<R: Rng>(
    tape: &mut Tape,
    model: &AgentModel,
    trainable: bool,
    scene: &SceneGraph,
    obs_model: &ObservationModel,
    ep: &Episode,
    policy: Policy,
    rng: &mut R,
) -> Result<SupervisedRollout, TrainError> {
    let rollout = rollout_mirrored(tape, &[Participant { model, trainable }], 0, scene, obs_model, ep, policy, rng)?;
    let ce = step_ce(tape, &rollout, 0)?;
    let loss = mean(tape, &ce)?;
    Ok(SupervisedRollout { rollout, ce, loss })
}

pub(crate) fn step_ce(tape: &mut Tape, rollout: &Rollout, participant: usize) -> Result<Vec<Var>, TrainError> {
    rollout
        .steps
        .iter()
        .map(|s| Ok(tape.cross_entropy(s.outputs[participant].logits, &s.oracle_target())?))
        .collect()
}

pub(crate) fn mean(tape: &mut Tape, xs: &[Var]) -> Result<Var, TrainError> {
    if xs.is_empty() {
        return Err(TrainError::Config("mean over an empty rollout".into()));
    }
    let joined = tape.concat(xs, 1)?;
    let total = tape.sum(joined)?;
    Ok(tape.scale(total, 1.0 / xs.len() as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Root of the per-episode observation noise streams, shared by every
    /// model evaluated with this config.
    pub noise_seed: u64,
    /// Evaluate only the first episodes of each split; 0 means all.
    pub max_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, noise_seed: 0, max_episodes: 0 }
    }
}

/// Greedy, gradient-free evaluation over a split.
pub fn evaluate(
    model: &AgentModel,
    split: &Split,
    obs_model: &ObservationModel,
    cfg: &EvalConfig,
) -> Result<(MetricsSummary, Vec<EpisodeResult>), TrainError> {
    let n = if cfg.max_episodes == 0 { split.episodes.len() } else { cfg.max_episodes.min(split.episodes.len()) };
    let mut results = Vec::with_capacity(n);
    for (i, ep) in split.episodes.iter().take(n).enumerate() {
        let scene = split.scene_of(ep);
        let mut rng = seed::child_rng(cfg.noise_seed, &split.name, i as u64);
        let mut tape = Tape::new();
        let part = Participant { model, trainable: false };
        let r = rollout_mirrored(&mut tape, &[part], 0, scene, obs_model, ep, Policy::StudentForced, &mut rng)?;
        results.push(EpisodeResult::new(scene, r.trajectory, ep.goal, r.stopped)?);
    }
    Ok((aggregate(&results, cfg.threshold)?, results))
}
