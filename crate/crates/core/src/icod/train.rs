use rand::Rng;

use super::rollout::{mean, rollout_mirrored, step_ce, EvalConfig, Participant};
use super::{BestTracker, MetricsRecord, Policy, Stage, StageConfig, StageReport, TrainError};
use crate::autodiff::{clip_grad_norm, AdamW, AdamWConfig, Gradients, ParamStore, Tape, Var};
use crate::env::{Benchmark, Episode};
use crate::makd::{makd_losses, total_student_loss, AdapterSet, DistillConfig};
use crate::model::{Ability, AgentModel};
use crate::seed;
use crate::weighting::{
    baseline_weights, combine, combine_with, sample_mkrw, teacher_uncertainty, transfer_weight, LearnedWeights,
    SampleWeights, TransferWeights, WeightingStrategy,
};

const N_ABILITIES: usize = 5;

fn optimizer(store: &ParamStore, cfg: &StageConfig) -> AdamW {
    AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, store)
}

/// A model under optimization with its optimizer and best checkpoint.
#[derive(Debug, Clone)]
pub struct Learner {
    pub name: String,
    pub model: AgentModel,
    pub optimizer: AdamW,
    pub best: BestTracker,
}

impl Learner {
    pub fn new(name: &str, model: AgentModel, cfg: &StageConfig) -> Self {
        let optimizer = optimizer(&model.params, cfg);
        Self { name: name.to_string(), model, optimizer, best: BestTracker::default() }
    }

    /// The model with its best validated parameters, or as is when never validated.
    pub fn best_model(&self) -> Result<AgentModel, TrainError> {
        let mut m = self.model.clone();
        if let Some(p) = &self.best.params {
            m.params.load_flat(p)?;
        }
        Ok(m)
    }
}

/// Feature adapters for one distillation direction, plus learnable ability
/// weights when that strategy is selected.
#[derive(Debug, Clone)]
pub struct AdapterLearner {
    pub adapters: AdapterSet,
    pub optimizer: AdamW,
    pub learned: Option<(LearnedWeights, AdamW)>,
}

impl AdapterLearner {
    pub fn new(adapters: AdapterSet, cfg: &StageConfig, weighting: &WeightingStrategy, seed: u64) -> Self {
        let optimizer = optimizer(&adapters.params, cfg);
        let learned = matches!(weighting, WeightingStrategy::Learned).then(|| {
            let lw = LearnedWeights::new(N_ABILITIES, &mut seed::child_rng(seed, "learned-weights", 0));
            let opt = optimizer_for_weights(&lw, cfg);
            (lw, opt)
        });
        Self { adapters, optimizer, learned }
    }
}

fn optimizer_for_weights(lw: &LearnedWeights, cfg: &StageConfig) -> AdamW {
    AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() }, &lw.params)
}

/// Resumable state of one stage. Batches, noise and weight draws derive from
/// `(seed, iteration)`, so the iteration counter is the whole RNG position.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub stage: Stage,
    pub iteration: usize,
    /// S1: the teacher. S2: the student. S3: teacher, then student.
    pub learners: Vec<Learner>,
    /// S2: student→teacher. S3: student→teacher, then teacher→student.
    pub adapters: Vec<AdapterLearner>,
}

impl TrainerState {
    pub fn teacher(model: AgentModel, cfg: &StageConfig) -> Self {
        Self { stage: Stage::S1, iteration: 0, learners: vec![Learner::new("teacher", model, cfg)], adapters: vec![] }
    }

    pub fn distill(student: AgentModel, teacher_dim: usize, cfg: &StageConfig, weighting: &WeightingStrategy) -> Self {
        let adapters = AdapterSet::new(student.hidden(), teacher_dim, seed::derive(cfg.seed, "adapters", 0));
        Self {
            stage: Stage::S2,
            iteration: 0,
            learners: vec![Learner::new("student", student, cfg)],
            adapters: vec![AdapterLearner::new(adapters, cfg, weighting, cfg.seed)],
        }
    }

    /// `forward` maps student features to teacher width, typically the S2 adapters.
    pub fn cotrain(
        teacher: AgentModel,
        student: AgentModel,
        forward: AdapterSet,
        cfg: &StageConfig,
        weighting: &WeightingStrategy,
    ) -> Self {
        let reverse = AdapterSet::new(teacher.hidden(), student.hidden(), seed::derive(cfg.seed, "adapters", 1));
        Self {
            stage: Stage::S3,
            iteration: 0,
            learners: vec![Learner::new("teacher", teacher, cfg), Learner::new("student", student, cfg)],
            adapters: vec![
                AdapterLearner::new(forward, cfg, weighting, seed::derive(cfg.seed, "direction", 0)),
                AdapterLearner::new(reverse, cfg, weighting, seed::derive(cfg.seed, "direction", 1)),
            ],
        }
    }

    pub fn learner(&self, name: &str) -> Option<&Learner> {
        self.learners.iter().find(|l| l.name == name)
    }
}

/// Inputs shared by every iteration of a stage.
#[derive(Debug, Clone, Copy)]
pub struct Job<'a> {
    pub bench: &'a Benchmark,
    pub stage: &'a StageConfig,
    pub eval: &'a EvalConfig,
    pub distill: &'a DistillConfig,
    pub weighting: &'a WeightingStrategy,
    /// Frozen teacher for S2.
    pub teacher: Option<&'a AgentModel>,
}

fn batch(job: &Job<'_>, iteration: usize) -> Vec<(usize, u64)> {
    let cfg = job.stage;
    let n = job.bench.train.episodes.len();
    let mut rng = seed::child_rng(cfg.seed, &format!("{}-batch", cfg.stage), iteration as u64);
    (0..cfg.batch_size)
        .map(|b| {
            let noise = seed::derive(cfg.seed, &format!("{}-noise", cfg.stage), (iteration * cfg.batch_size + b) as u64);
            (rng.gen_range(0..n), noise)
        })
        .collect()
}

/// Loss and gradients of one supervised episode.
pub(super) fn supervised_episode(
    model: &AgentModel,
    job: &Job<'_>,
    ep: &Episode,
    policy: Policy,
    noise: u64,
) -> Result<(f64, Gradients), TrainError> {
    let mut tape = Tape::new();
    let scene = job.bench.train.scene_of(ep);
    let part = Participant { model, trainable: true };
    let r = rollout_mirrored(&mut tape, &[part], 0, scene, &job.bench.observation, ep, policy, &mut seed::rng(noise))?;
    let ce = step_ce(&mut tape, &r, 0)?;
    let loss = mean(&mut tape, &ce)?;
    let scaled = tape.scale(loss, 1.0 / job.stage.batch_size as f64)?;
    Ok((tape.scalar(loss), tape.backward(scaled)?))
}

/// Parameter-name prefixes of the last layer behind each ability's output.
fn final_layer_prefixes(model: &AgentModel, a: Ability) -> Vec<String> {
    let c = &model.config;
    match a {
        Ability::Visual => vec![format!("pano.layer{}.", c.pano_layers - 1)],
        Ability::Text => vec![format!("text.layer{}.", c.text_layers - 1)],
        Ability::Local => vec![format!("local.layer{}.", c.cross_layers - 1)],
        Ability::Global => vec![format!("global.layer{}.", c.cross_layers - 1)],
        Ability::Behavior => vec!["head_local.".into(), "head_global.".into(), "fusion.".into()],
    }
}

fn grad_norm(store: &ParamStore, grads: &Gradients, prefixes: &[String]) -> f64 {
    (0..store.len())
        .filter(|&i| prefixes.iter().any(|p| store.name(i).starts_with(p.as_str())))
        .filter_map(|i| grads.get(store.key(i)))
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Ability weights from inverse final-layer gradient norms of each ability's
/// own loss. Absent abilities get weight 0 and do not enter the normalization.
fn grad_adjust_weights(
    tape: &mut Tape,
    learner: &AgentModel,
    rows: &[Vec<Option<Var>>],
    gamma: &SampleWeights,
) -> Result<TransferWeights, TrainError> {
    let mut present = Vec::new();
    let mut norms = Vec::new();
    for (i, a) in Ability::ALL.into_iter().enumerate() {
        let mut terms = Vec::new();
        for (row, &g) in rows.iter().zip(&gamma.0) {
            if let Some(l) = row[i] {
                terms.push(tape.scale(l, g)?);
            }
        }
        if terms.is_empty() {
            continue;
        }
        let li = mean(tape, &terms)?;
        let grads = tape.backward(li)?;
        present.push(i);
        norms.push(grad_norm(&learner.params, &grads, &final_layer_prefixes(learner, a)));
    }
    let mut out = vec![0.0; N_ABILITIES];
    if present.is_empty() {
        return Ok(TransferWeights(out));
    }
    let w = baseline_weights(&WeightingStrategy::GradAdjust, present.len(), Some(&norms))?;
    for (i, v) in present.into_iter().zip(w.0) {
        out[i] = v;
    }
    Ok(TransferWeights(out))
}

pub(super) struct KdOutcome {
    pub loss: f64,
    pub grads: Gradients,
}

/// One episode of knowledge transfer from `guide` into `learner`: the learner
/// drives, the guide mirrors it frozen, and the loss is
/// `α·mean_n Σᵢ λᵢ γₙ Lᵢ,ₙ + (1−α)·CE`.
#[allow(clippy::too_many_arguments)]
pub(super) fn kd_episode(
    learner: &AgentModel,
    guide: &AgentModel,
    direction: &AdapterLearner,
    lambda: Option<&TransferWeights>,
    alpha: f64,
    job: &Job<'_>,
    ep: &Episode,
    policy: Policy,
    noise: u64,
) -> Result<KdOutcome, TrainError> {
    let mut tape = Tape::new();
    let scene = job.bench.train.scene_of(ep);
    let parts = [Participant { model: learner, trainable: true }, Participant { model: guide, trainable: false }];
    let r = rollout_mirrored(&mut tape, &parts, 0, scene, &job.bench.observation, ep, policy, &mut seed::rng(noise))?;
    let ce = step_ce(&mut tape, &r, 0)?;
    let ce = mean(&mut tape, &ce)?;
    let mut rows = Vec::with_capacity(r.steps.len());
    let mut gamma = Vec::with_capacity(r.steps.len());
    for (n, s) in r.steps.iter().enumerate() {
        let set = makd_losses(&mut tape, &s.outputs[1].meta, &s.outputs[0].meta, &direction.adapters, true, job.distill, n)?;
        rows.push(set.per_ability(&mut tape)?);
        let u = teacher_uncertainty(&s.oracle_target(), &s.outputs[1].probs);
        gamma.push(transfer_weight(u, job.distill.beta));
    }
    let gamma = SampleWeights(gamma);
    let kd = match (job.weighting, &direction.learned) {
        (WeightingStrategy::Learned, Some((lw, _))) => {
            let vars = lw.bind(&mut tape, true)?;
            combine_with(&mut tape, &rows, &vars, &gamma)?
        }
        (WeightingStrategy::GradAdjust, _) => {
            let w = grad_adjust_weights(&mut tape, learner, &rows, &gamma)?;
            combine(&mut tape, &rows, &w, &gamma)?
        }
        (_, _) => {
            let w = lambda.ok_or_else(|| TrainError::Config("no ability weights drawn".into()))?;
            combine(&mut tape, &rows, w, &gamma)?
        }
    };
    let loss = total_student_loss(&mut tape, kd, ce, alpha)?;
    let scaled = tape.scale(loss, 1.0 / job.stage.batch_size as f64)?;
    Ok(KdOutcome { loss: tape.scalar(loss), grads: tape.backward(scaled)? })
}

/// λ for one optimizer step, or `None` when it is computed per episode.
pub(super) fn draw_lambda(job: &Job<'_>, iteration: usize, direction: usize) -> Option<TransferWeights> {
    let label = format!("{}-lambda-{direction}", job.stage.stage);
    match *job.weighting {
        WeightingStrategy::Mkrw { k, tau } => {
            Some(sample_mkrw(&mut seed::child_rng(job.stage.seed, &label, iteration as u64), N_ABILITIES, k, tau))
        }
        WeightingStrategy::Equal => Some(TransferWeights(vec![1.0; N_ABILITIES])),
        WeightingStrategy::Learned | WeightingStrategy::GradAdjust => None,
    }
}

fn update(store: &mut ParamStore, opt: &mut AdamW, clip: f64) -> Result<(), TrainError> {
    if clip > 0.0 {
        clip_grad_norm(store, clip);
    }
    opt.step(store)?;
    Ok(())
}

fn check_finite(job: &Job<'_>, iteration: usize, loss: f64, ep: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(TrainError::Divergence {
        stage: job.stage.stage,
        iteration,
        loss,
        detail: format!("training episode {ep}"),
    })
}

/// One knowledge-transfer optimizer step on `learners[li]` guided by `guide`.
fn kd_iteration(
    state: &mut TrainerState,
    job: &Job<'_>,
    li: usize,
    guide: &AgentModel,
    di: usize,
    alpha: f64,
) -> Result<f64, TrainError> {
    let it = state.iteration;
    let policy = job.stage.policy_at(it);
    let lambda = draw_lambda(job, it, di);
    let mut total = 0.0;
    let mut outcomes = Vec::with_capacity(job.stage.batch_size);
    for (ep_idx, noise) in batch(job, it) {
        let ep = &job.bench.train.episodes[ep_idx];
        let o = kd_episode(&state.learners[li].model, guide, &state.adapters[di], lambda.as_ref(), alpha, job, ep, policy, noise)?;
        check_finite(job, it, o.loss, ep_idx)?;
        total += o.loss;
        outcomes.push(o);
    }
    let learner = &mut state.learners[li];
    let direction = &mut state.adapters[di];
    learner.model.params.zero_grad();
    direction.adapters.params.zero_grad();
    if let Some((lw, _)) = &mut direction.learned {
        lw.params.zero_grad();
    }
    for o in &outcomes {
        learner.model.params.accumulate(&o.grads);
        direction.adapters.params.accumulate(&o.grads);
        if let Some((lw, _)) = &mut direction.learned {
            lw.params.accumulate(&o.grads);
        }
    }
    update(&mut learner.model.params, &mut learner.optimizer, job.stage.clip_norm)?;
    update(&mut direction.adapters.params, &mut direction.optimizer, job.stage.clip_norm)?;
    if let Some((lw, opt)) = &mut direction.learned {
        update(&mut lw.params, opt, job.stage.clip_norm)?;
    }
    Ok(total / job.stage.batch_size as f64)
}

fn supervised_iteration(state: &mut TrainerState, job: &Job<'_>) -> Result<f64, TrainError> {
    let it = state.iteration;
    let policy = job.stage.policy_at(it);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(job.stage.batch_size);
    for (ep_idx, noise) in batch(job, it) {
        let ep = &job.bench.train.episodes[ep_idx];
        let (loss, g) = supervised_episode(&state.learners[0].model, job, ep, policy, noise)?;
        check_finite(job, it, loss, ep_idx)?;
        total += loss;
        grads.push(g);
    }
    let learner = &mut state.learners[0];
    learner.model.params.zero_grad();
    for g in &grads {
        learner.model.params.accumulate(g);
    }
    update(&mut learner.model.params, &mut learner.optimizer, job.stage.clip_norm)?;
    Ok(total / job.stage.batch_size as f64)
}

/// Runs one optimizer step of the state's stage and returns its mean loss.
/// Co-training alternates: even iterations update the teacher, odd ones the student.
pub fn iterate(state: &mut TrainerState, job: &Job<'_>) -> Result<f64, TrainError> {
    let loss = match state.stage {
        Stage::S1 => supervised_iteration(state, job)?,
        Stage::S2 => {
            let teacher = job.teacher.ok_or_else(|| TrainError::Config("distillation needs a teacher".into()))?;
            kd_iteration(state, job, 0, teacher, 0, job.stage.alpha)?
        }
        Stage::S3 => {
            if state.iteration % 2 == 0 {
                let guide = state.learners[1].model.clone();
                kd_iteration(state, job, 0, &guide, 1, job.stage.alpha_t)?
            } else {
                let guide = state.learners[0].model.clone();
                kd_iteration(state, job, 1, &guide, 0, job.stage.alpha_s)?
            }
        }
        Stage::S4 => return Err(TrainError::Config("the chain stage has no iterations of its own".into())),
    };
    state.iteration += 1;
    Ok(loss)
}

/// Evaluates every learner on both validation splits and updates best checkpoints.
pub fn validate(state: &mut TrainerState, job: &Job<'_>, report: &mut StageReport) -> Result<(), TrainError> {
    let bench = job.bench;
    for l in &mut state.learners {
        let (seen, _) = super::evaluate(&l.model, &bench.val_seen, &bench.observation, job.eval)?;
        let (unseen, _) = super::evaluate(&l.model, &bench.val_unseen, &bench.observation, job.eval)?;
        let log = report.metrics.entry(l.name.clone()).or_default();
        log.push(MetricsRecord::new("val_seen", state.iteration, job.stage.seed, &seen));
        log.push(MetricsRecord::new("val_unseen", state.iteration, job.stage.seed, &unseen));
        l.best.offer(state.iteration, unseen.sr, unseen.spl, &l.model.params);
    }
    Ok(())
}

/// Continues a stage from `state.iteration` to `max_iters`, validating every
/// `val_interval` iterations and at the end.
pub fn run_stage(state: &mut TrainerState, job: &Job<'_>, report: &mut StageReport) -> Result<(), TrainError> {
    job.stage.validate()?;
    job.distill.validate()?;
    job.weighting.validate()?;
    if state.stage != job.stage.stage {
        return Err(TrainError::Config(format!("state is {} but config is {}", state.stage, job.stage.stage)));
    }
    report.stage = Some(state.stage);
    // co-training starts from converged models, which compete for best checkpoint
    if state.stage == Stage::S3 && state.iteration == 0 {
        validate(state, job, report)?;
    }
    let max = job.stage.max_iters;
    while state.iteration < max {
        let loss = iterate(state, job)?;
        report.losses.push(loss);
        if state.iteration % job.stage.val_interval == 0 || state.iteration == max {
            validate(state, job, report)?;
        }
    }
    Ok(())
}

/// Trains a teacher with per-step oracle cross-entropy and returns its best checkpoint.
pub fn train_teacher(model: AgentModel, job: &Job<'_>) -> Result<(AgentModel, StageReport), TrainError> {
    let mut state = TrainerState::teacher(model, job.stage);
    let mut report = StageReport::default();
    run_stage(&mut state, job, &mut report)?;
    Ok((state.learners[0].best_model()?, report))
}

/// Distills `job.teacher` into a fresh student. Returns the best student and
/// the trained feature adapters.
pub fn distill_student(student: AgentModel, job: &Job<'_>) -> Result<(AgentModel, AdapterSet, StageReport), TrainError> {
    let teacher = job.teacher.ok_or_else(|| TrainError::Config("distillation needs a teacher".into()))?;
    let mut state = TrainerState::distill(student, teacher.hidden(), job.stage, job.weighting);
    let mut report = StageReport::default();
    run_stage(&mut state, job, &mut report)?;
    let adapters = state.adapters.swap_remove(0).adapters;
    Ok((state.learners[0].best_model()?, adapters, report))
}

/// Alternating co-training. Each model keeps its own best checkpoint.
pub fn cotrain(
    teacher: AgentModel,
    student: AgentModel,
    forward: AdapterSet,
    job: &Job<'_>,
) -> Result<(AgentModel, AgentModel, StageReport), TrainError> {
    let mut state = TrainerState::cotrain(teacher, student, forward, job.stage, job.weighting);
    let mut report = StageReport::default();
    run_stage(&mut state, job, &mut report)?;
    Ok((state.learners[0].best_model()?, state.learners[1].best_model()?, report))
}
