//! The work behind each CLI subcommand. Every command writes into a run
//! directory: `manifest.jsonl`, `checkpoints/`, `metrics/` and, while a stage
//! is in progress, `state/` for resuming.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{copy_by_name, load_checkpoint, save_checkpoint, BestSummary, Checkpoint, RngPosition};
use super::config::ExperimentConfig;
use super::logs::{emit_plot_data, read_jsonl, write_jsonl, LossRecord};
use super::manifest::{ManifestEvent, RunManifest};
use super::HarnessError;
use crate::autodiff::ParamStore;
use crate::env::{io as scene_io, Benchmark};
use crate::icod::{
    evaluate, run_chain, run_stage, BestTracker, ChainConfig, Job, MetricsRecord, Stage, StageOutcome, StageReport,
    TrainerState,
};
use crate::makd::AdapterSet;
use crate::model::AgentModel;

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), source: e }
}

fn prefix(link: usize, stage: Stage) -> String {
    format!("{link}-{stage}")
}


/// Writes the three splits as JSON-lines scene files under `out/scenes`.
pub fn gen_scenes(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let bench = cfg.benchmark()?;
    let dir = out.join("scenes");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut written = Vec::new();
    for split in [&bench.train, &bench.val_seen, &bench.val_unseen] {
        let path = dir.join(format!("{}.jsonl", split.name));
        scene_io::write_split(&path, split)?;
        written.push(path);
    }
    Ok(written)
}

fn start(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<RunManifest, HarnessError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut m = RunManifest::open(out)?;
    m.append(&ManifestEvent::Start { version: super::manifest::MANIFEST_VERSION, command: command.into(), config: Box::new(cfg.clone()) })?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
        m.append(&ManifestEvent::Warning { message: w })?;
    }
    Ok(m)
}

fn best_summary(b: &BestTracker) -> Option<BestSummary> {
    b.params.as_ref().map(|_| BestSummary { sr: b.sr, spl: b.spl, iteration: b.iteration })
}

fn save_state(dir: &Path, pre: &str, state: &TrainerState, seed: u64) -> Result<(), HarnessError> {
    let rng = RngPosition { seed, iteration: state.iteration };
    let sdir = dir.join("state");
    for l in &state.learners {
        let mut ck = Checkpoint::of_model(&l.model, rng).with_optimizer(&l.optimizer);
        if let (Some(best), Some(params)) = (best_summary(&l.best), &l.best.params) {
            ck = ck.with_best(best);
            let mut m = l.model.clone();
            m.params.load_flat(params).map_err(|e| HarnessError::Format(e.to_string()))?;
            save_checkpoint(&sdir.join(format!("{pre}-{}.best.ckpt", l.name)), &Checkpoint::of_model(&m, rng))?;
        }
        save_checkpoint(&sdir.join(format!("{pre}-{}.ckpt", l.name)), &ck)?;
    }
    for (d, a) in state.adapters.iter().enumerate() {
        let ck = Checkpoint::of_params("adapters", &a.adapters.params, rng).with_optimizer(&a.optimizer);
        save_checkpoint(&sdir.join(format!("{pre}-adapters{d}.ckpt")), &ck)?;
        if let Some((lw, opt)) = &a.learned {
            let ck = Checkpoint::of_params("weights", &lw.params, rng).with_optimizer(opt);
            save_checkpoint(&sdir.join(format!("{pre}-weights{d}.ckpt")), &ck)?;
        }
    }
    Ok(())
}

fn restore_params(
    path: &Path,
    seed: u64,
    store: &mut ParamStore,
) -> Result<(Checkpoint, crate::autodiff::AdamW), HarnessError> {
    let ck = load_checkpoint(path)?;
    if ck.rng.seed != seed {
        return Err(HarnessError::Config {
            line: None,
            msg: format!("{} was written with seed {}, not {seed}", path.display(), ck.rng.seed),
        });
    }
    copy_by_name(&ck.params, store)?;
    let opt = ck
        .optimizer
        .clone()
        .ok_or_else(|| HarnessError::Format(format!("{} holds no optimizer state", path.display())))?;
    Ok((ck, opt))
}

fn restore_state(dir: &Path, pre: &str, state: &mut TrainerState, seed: u64) -> Result<(), HarnessError> {
    let sdir = dir.join("state");
    let mut iteration = None;
    for l in &mut state.learners {
        let path = sdir.join(format!("{pre}-{}.ckpt", l.name));
        if !path.exists() {
            return Err(HarnessError::Missing(format!("cannot resume: {} is missing", path.display())));
        }
        let (ck, opt) = restore_params(&path, seed, &mut l.model.params)?;
        l.optimizer = opt;
        l.best = BestTracker::default();
        if let Some(b) = ck.best {
            let best = load_checkpoint(&sdir.join(format!("{pre}-{}.best.ckpt", l.name)))?;
            let mut store = l.model.params.clone();
            copy_by_name(&best.params, &mut store)?;
            l.best = BestTracker { sr: b.sr, spl: b.spl, iteration: b.iteration, params: Some(store.flatten()) };
        }
        iteration.get_or_insert(ck.iteration);
        if iteration != Some(ck.iteration) {
            return Err(HarnessError::Format("state checkpoints disagree on the iteration".into()));
        }
    }
    for (d, a) in state.adapters.iter_mut().enumerate() {
        let (_, opt) = restore_params(&sdir.join(format!("{pre}-adapters{d}.ckpt")), seed, &mut a.adapters.params)?;
        a.optimizer = opt;
        if let Some((lw, o)) = &mut a.learned {
            let (_, opt) = restore_params(&sdir.join(format!("{pre}-weights{d}.ckpt")), seed, &mut lw.params)?;
            *o = opt;
        }
    }
    state.iteration = iteration.unwrap_or(0);
    Ok(())
}

struct StageLogs {
    metrics: Vec<String>,
    loss: String,
}

/// Logs carry the master `seed` so that series from several runs can be told apart.
fn write_logs(dir: &Path, pre: &str, report: &StageReport, seed: u64) -> Result<StageLogs, HarnessError> {
    let mut metrics = Vec::new();
    for (name, records) in &report.metrics {
        let r = format!("metrics/{pre}-{name}.jsonl");
        let records: Vec<MetricsRecord> = records.iter().map(|m| MetricsRecord { seed, ..m.clone() }).collect();
        write_jsonl(&dir.join(&r), &records)?;
        metrics.push(r);
    }
    let losses: Vec<LossRecord> =
        report.losses.iter().enumerate().map(|(i, &loss)| LossRecord { iteration: i + 1, loss, seed }).collect();
    let loss = format!("metrics/{pre}.loss.jsonl");
    write_jsonl(&dir.join(&loss), &losses)?;
    Ok(StageLogs { metrics, loss })
}

fn read_logs(dir: &Path, pre: &str, state: &TrainerState) -> Result<StageReport, HarnessError> {
    let mut report = StageReport { stage: Some(state.stage), ..StageReport::default() };
    for l in &state.learners {
        let path = dir.join(format!("metrics/{pre}-{}.jsonl", l.name));
        if path.exists() {
            report.metrics.insert(l.name.clone(), read_jsonl(&path)?);
        }
    }
    let path = dir.join(format!("metrics/{pre}.loss.jsonl"));
    if path.exists() {
        report.losses = read_jsonl::<LossRecord>(&path)?.into_iter().map(|r| r.loss).collect();
    }
    if report.losses.len() != state.iteration {
        return Err(HarnessError::Format(format!(
            "loss log has {} entries but the state is at iteration {}",
            report.losses.len(),
            state.iteration
        )));
    }
    Ok(report)
}

fn final_metrics(report: &StageReport) -> BTreeMap<String, BTreeMap<String, MetricsRecord>> {
    report
        .metrics
        .iter()
        .map(|(name, records)| {
            let mut by_split = BTreeMap::new();
            for r in records {
                by_split.insert(r.split.clone(), r.clone());
            }
            (name.clone(), by_split)
        })
        .collect()
}

/// Runs a stage in chunks ending at validation points, saving the full
/// training state after each so that `resume` can pick up where it stopped.
fn run_persisted(
    state: &mut TrainerState,
    job: &Job<'_>,
    dir: &Path,
    link: usize,
    resume: bool,
    master_seed: u64,
    manifest: &mut RunManifest,
) -> Result<StageReport, HarnessError> {
    let pre = prefix(link, state.stage);
    let seed = job.stage.seed;
    let mut report = if resume {
        restore_state(dir, &pre, state, seed)?;
        read_logs(dir, &pre, state)?
    } else {
        StageReport::default()
    };
    manifest.append(&ManifestEvent::StageStart { link, stage: state.stage, resumed_at: state.iteration })?;
    let max = job.stage.max_iters;
    let interval = job.stage.val_interval.max(1);
    loop {
        let target = ((state.iteration / interval + 1) * interval).min(max);
        let chunk = crate::icod::StageConfig { max_iters: target, ..*job.stage };
        run_stage(state, &Job { stage: &chunk, ..*job }, &mut report)?;
        save_state(dir, &pre, state, seed)?;
        write_logs(dir, &pre, &report, master_seed)?;
        if state.iteration >= max {
            break;
        }
    }
    Ok(report)
}

fn finish_stage(
    dir: &Path,
    link: usize,
    stage: Stage,
    report: &StageReport,
    models: &[(&str, &AgentModel)],
    adapters: Option<&AdapterSet>,
    seed: u64,
    manifest: &mut RunManifest,
) -> Result<Vec<String>, HarnessError> {
    let pre = prefix(link, stage);
    let iteration = report.losses.len();
    let rng = RngPosition { seed, iteration };
    let mut checkpoints = Vec::new();
    for (name, model) in models {
        let r = format!("checkpoints/{pre}-{name}.ckpt");
        save_checkpoint(&dir.join(&r), &Checkpoint::of_model(model, rng))?;
        checkpoints.push(r);
    }
    if let Some(a) = adapters {
        let r = format!("checkpoints/{pre}-adapters.ckpt");
        save_checkpoint(&dir.join(&r), &Checkpoint::of_params("adapters", &a.params, rng))?;
        checkpoints.push(r);
    }
    let logs = write_logs(dir, &pre, report, seed)?;
    manifest.append(&ManifestEvent::StageEnd {
        link,
        stage,
        checkpoints: checkpoints.clone(),
        metrics_logs: logs.metrics,
        loss_log: logs.loss,
        final_metrics: final_metrics(report),
    })?;
    Ok(checkpoints)
}

fn job<'a>(bench: &'a Benchmark, chain: &'a ChainConfig, stage: &'a crate::icod::StageConfig) -> Job<'a> {
    Job { bench, stage, eval: &chain.eval, distill: &chain.makd, weighting: &chain.weighting, teacher: None }
}

fn load_model(path: &Path) -> Result<AgentModel, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::Missing(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?.to_model()?)
}

/// Teacher training (S1) of the largest ladder model.
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<AgentModel, HarnessError> {
    let bench = cfg.benchmark()?;
    let chain = cfg.resolved_chain();
    let mut manifest = start(cfg, out, "train")?;
    let s1 = chain.stage_config(Stage::S1, 0);
    let model = AgentModel::new(cfg.model_config(cfg.ladder[0]), chain.init_seed(0)).map_err(crate::icod::TrainError::from)?;
    let mut state = TrainerState::teacher(model, &s1);
    let report = run_persisted(&mut state, &job(&bench, &chain, &s1), out, 0, resume, cfg.seed, &mut manifest)?;
    let best = state.learners[0].best_model()?;
    let ckpts = finish_stage(out, 0, Stage::S1, &report, &[("teacher", &best)], None, cfg.seed, &mut manifest)?;
    manifest.append(&ManifestEvent::Finish { checkpoints: ckpts })?;
    Ok(best)
}

/// Student distillation (S2) of the smallest ladder model from a teacher checkpoint.
pub fn distill(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher: &Path,
    resume: bool,
) -> Result<(AgentModel, AdapterSet, StageReport), HarnessError> {
    let teacher = load_model(teacher)?;
    let bench = cfg.benchmark()?;
    let chain = cfg.resolved_chain();
    let link = cfg.ladder.len().saturating_sub(1).max(1);
    let size = *cfg.ladder.last().expect("validated ladder");
    let mut manifest = start(cfg, out, "distill")?;
    let s2 = chain.stage_config(Stage::S2, link);
    let student = AgentModel::new(cfg.model_config(size), chain.init_seed(link)).map_err(crate::icod::TrainError::from)?;
    let mut state = TrainerState::distill(student, teacher.hidden(), &s2, &chain.weighting);
    let j = Job { teacher: Some(&teacher), ..job(&bench, &chain, &s2) };
    let report = run_persisted(&mut state, &j, out, link, resume, cfg.seed, &mut manifest)?;
    let best = state.learners[0].best_model()?;
    let adapters = state.adapters.swap_remove(0).adapters;
    let ckpts = finish_stage(out, link, Stage::S2, &report, &[("student", &best)], Some(&adapters), cfg.seed, &mut manifest)?;
    manifest.append(&ManifestEvent::Finish { checkpoints: ckpts })?;
    Ok((best, adapters, report))
}

/// Interactive co-training (S3) of a teacher and student checkpoint pair.
pub fn cotrain(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher: &Path,
    student: &Path,
    adapters: Option<&Path>,
    resume: bool,
) -> Result<(AgentModel, AgentModel), HarnessError> {
    let teacher = load_model(teacher)?;
    let student = load_model(student)?;
    let bench = cfg.benchmark()?;
    let chain = cfg.resolved_chain();
    let link = cfg.ladder.len().saturating_sub(1).max(1);
    let s3 = chain.stage_config(Stage::S3, link);
    let mut forward = AdapterSet::new(student.hidden(), teacher.hidden(), crate::seed::derive(s3.seed, "adapters", 0));
    if let Some(p) = adapters {
        if !p.exists() {
            return Err(HarnessError::Missing(format!("checkpoint {} not found", p.display())));
        }
        copy_by_name(&load_checkpoint(p)?.params, &mut forward.params)?;
    }
    let mut manifest = start(cfg, out, "cotrain")?;
    let mut state = TrainerState::cotrain(teacher, student, forward, &s3, &chain.weighting);
    let report = run_persisted(&mut state, &job(&bench, &chain, &s3), out, link, resume, cfg.seed, &mut manifest)?;
    let t = state.learners[0].best_model()?;
    let s = state.learners[1].best_model()?;
    let ckpts = finish_stage(out, link, Stage::S3, &report, &[("teacher", &t), ("student", &s)], None, cfg.seed, &mut manifest)?;
    manifest.append(&ManifestEvent::Finish { checkpoints: ckpts })?;
    Ok((t, s))
}

/// The full ladder: S1, then S2 and S3 per link. Writes `checkpoints/final-{i}.ckpt`.
pub fn chain(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AgentModel>, HarnessError> {
    let bench = cfg.benchmark()?;
    let chain = cfg.resolved_chain();
    let spec = cfg.chain_spec()?;
    let mut manifest = start(cfg, out, "chain")?;
    let mut failure: Option<HarnessError> = None;
    let report = run_chain(&spec, &chain, &bench, &mut |o: StageOutcome<'_>| {
        if let Err(e) = finish_stage(out, o.link, o.stage, o.report, &o.models, None, chain.seed, &mut manifest) {
            failure = Some(e);
            return Err(crate::icod::TrainError::Config("could not persist stage results".into()));
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let report = report?;
    let mut finals = Vec::new();
    for (i, m) in report.models.iter().enumerate() {
        let r = format!("checkpoints/final-{i}.ckpt");
        save_checkpoint(&out.join(&r), &Checkpoint::of_model(m, RngPosition { seed: chain.seed, iteration: 0 }))?;
        finals.push(r);
    }
    manifest.append(&ManifestEvent::Finish { checkpoints: finals })?;
    Ok(report.models)
}

/// Greedy evaluation of a checkpoint on the named splits.
pub fn eval(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, splits: &[String]) -> Result<Vec<MetricsRecord>, HarnessError> {
    if !checkpoint.exists() {
        return Err(HarnessError::Missing(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.to_model()?;
    let bench = cfg.benchmark()?;
    let mut records = Vec::new();
    for name in splits {
        let split = bench
            .split(name)
            .ok_or_else(|| HarnessError::Config { line: None, msg: format!("unknown split `{name}`") })?;
        let (m, _) = evaluate(&model, split, &bench.observation, &cfg.chain.eval)?;
        records.push(MetricsRecord::new(name, ck.iteration, cfg.seed, &m));
    }
    let mut manifest = start(cfg, out, "eval")?;
    manifest.append(&ManifestEvent::Eval { checkpoint: checkpoint.display().to_string(), metrics: records.clone() })?;
    Ok(records)
}

/// Expands `key=v1,v2` axes into their cartesian product of assignments.
pub fn expand_grid(grid: &[String]) -> Result<Vec<Vec<(String, String)>>, HarnessError> {
    let mut combos: Vec<Vec<(String, String)>> = vec![vec![]];
    for axis in grid {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| HarnessError::Config { line: None, msg: format!("grid axis `{axis}` is not key=v1,v2,...") })?;
        let key = resolve_alias(key.trim());
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(HarnessError::Config { line: None, msg: format!("grid axis `{axis}` has no values") });
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                let key = &key;
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

/// Short names for the usual ablation axes.
pub fn resolve_alias(key: &str) -> String {
    let full = match key {
        "beta" => "chain.makd.beta",
        "alpha" => "chain.distill.alpha",
        "tau_logit" => "chain.makd.tau_logit",
        "weighting" => "chain.weighting.kind",
        "k" => "chain.weighting.k",
        "tau" => "chain.weighting.tau",
        other => {
            if let Some(rest) = other.strip_prefix("abilities.") {
                return format!("chain.makd.abilities.{rest}");
            }
            if let Some(rest) = other.strip_prefix("kinds.") {
                return format!("chain.makd.kinds.{rest}");
            }
            other
        }
    };
    full.to_string()
}

/// One row of an ablation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub assignment: Vec<(String, String)>,
    pub seed: u64,
    pub seen: MetricsRecord,
    pub unseen: MetricsRecord,
}

/// Distills a student once per grid point and seed, from `teacher` or from a
/// teacher trained first under `out/teacher`. Writes `out/ablate.csv`.
pub fn ablate(
    cfg: &ExperimentConfig,
    out: &Path,
    grid: &[String],
    seeds: &[u64],
    teacher: Option<&Path>,
) -> Result<Vec<AblationRow>, HarnessError> {
    let combos = expand_grid(grid)?;
    let mut variants = Vec::new();
    for combo in &combos {
        let mut c = cfg.clone();
        for (k, v) in combo {
            c.set(k, v)?;
        }
        variants.push(c);
    }
    let teacher_path = match teacher {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out.join("teacher");
            train(cfg, &dir, false)?;
            dir.join(format!("checkpoints/{}.ckpt", "0-S1-teacher"))
        }
    };
    let mut rows = Vec::new();
    let mut csv = String::new();
    let keys: Vec<String> = combos.first().map(|c| c.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    csv.push_str(&keys.join(","));
    if !keys.is_empty() {
        csv.push(',');
    }
    csv.push_str("seed,seen_sr,sr,spl,ne,osr\n");
    for (combo, variant) in combos.iter().zip(&variants) {
        for &seed in seeds {
            let c = variant.with_seed(seed);
            let name: Vec<String> = combo.iter().map(|(k, v)| format!("{}={}", k.rsplit('.').next().unwrap_or(k), v.trim_matches('"'))).collect();
            let dir = out.join(if name.is_empty() { "base".to_string() } else { name.join("_") }).join(format!("seed{seed}"));
            let (student, _, _) = distill(&c, &dir, &teacher_path, false)?;
            let bench = c.benchmark()?;
            let (seen, _) = evaluate(&student, &bench.val_seen, &bench.observation, &c.chain.eval)?;
            let (unseen, _) = evaluate(&student, &bench.val_unseen, &bench.observation, &c.chain.eval)?;
            let seen = MetricsRecord::new("val_seen", c.chain.distill.max_iters, seed, &seen);
            let unseen = MetricsRecord::new("val_unseen", c.chain.distill.max_iters, seed, &unseen);
            for (_, v) in combo {
                csv.push_str(v.trim_matches('"'));
                csv.push(',');
            }
            csv.push_str(&format!("{seed},{},{},{},{},{}\n", seen.sr, unseen.sr, unseen.spl, unseen.ne, unseen.osr));
            rows.push(AblationRow { assignment: combo.clone(), seed, seen, unseen });
        }
    }
    let path = out.join("ablate.csv");
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

/// Collects the logs listed in each run's manifest and writes CSV series.
pub fn plot_data(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut metrics = Vec::new();
    let mut losses = Vec::new();
    for run in runs {
        for event in RunManifest::read(run)? {
            if let ManifestEvent::StageEnd { metrics_logs, loss_log, .. } = event {
                metrics.extend(metrics_logs.iter().map(|p| run.join(p)));
                losses.push(run.join(loss_log));
            }
        }
    }
    emit_plot_data(&metrics, &losses, out)
}
