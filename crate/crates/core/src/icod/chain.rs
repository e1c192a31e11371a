use serde::{Deserialize, Serialize};

use super::rollout::EvalConfig;
use super::train::{cotrain, distill_student, train_teacher, Job};
use super::{Stage, StageConfig, StageReport, TrainError};
use crate::env::Benchmark;
use crate::makd::DistillConfig;
use crate::model::{AgentModel, ModelConfig};
use crate::seed;
use crate::weighting::WeightingStrategy;

/// Model sizes from largest to smallest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub models: Vec<ModelConfig>,
}

impl ChainSpec {
    pub fn new(models: Vec<ModelConfig>) -> Result<Self, TrainError> {
        let spec = Self { models };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.models.is_empty() {
            return Err(TrainError::Config("empty chain".into()));
        }
        for w in self.models.windows(2) {
            if w[1].hidden >= w[0].hidden {
                return Err(TrainError::Config(format!(
                    "chain widths must strictly decrease, got {} then {}",
                    w[0].hidden, w[1].hidden
                )));
            }
        }
        for m in &self.models {
            m.validate()?;
        }
        Ok(())
    }
}

/// Settings for a whole chain. Stage seeds are re-derived per link from
/// `seed`, so the `seed` fields of the stage configs are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub seed: u64,
    pub teacher: StageConfig,
    pub distill: StageConfig,
    pub cotrain: StageConfig,
    /// Skip co-training and hand the distilled student straight to the next link.
    pub cotrain_enabled: bool,
    pub makd: DistillConfig,
    pub weighting: WeightingStrategy,
    pub eval: EvalConfig,
}

impl Default for ChainConfig {
    fn default() -> Self {
        let distill = StageConfig::distill();
        Self {
            seed: 0,
            teacher: StageConfig::teacher(),
            distill,
            cotrain: StageConfig::cotrain_after(&distill),
            cotrain_enabled: true,
            makd: DistillConfig::default(),
            weighting: WeightingStrategy::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ChainConfig {
    pub fn stage_config(&self, stage: Stage, link: usize) -> StageConfig {
        let base = match stage {
            Stage::S1 => self.teacher,
            Stage::S2 => self.distill,
            _ => self.cotrain,
        };
        StageConfig { seed: seed::derive(self.seed, &stage.to_string(), link as u64), ..base }
    }

    pub fn init_seed(&self, position: usize) -> u64 {
        seed::derive(self.seed, "init", position as u64)
    }
}

/// Handed to the observer after every stage.
#[derive(Debug)]
pub struct StageOutcome<'a> {
    /// 0 for the head's training, `i` for the link producing model `i`.
    pub link: usize,
    pub stage: Stage,
    pub report: &'a StageReport,
    pub models: Vec<(&'static str, &'a AgentModel)>,
}

#[derive(Debug, Clone)]
pub struct ChainReport {
    /// Final version of every model in chain order.
    pub models: Vec<AgentModel>,
    pub stages: Vec<(usize, StageReport)>,
}

fn job<'a>(bench: &'a Benchmark, cfg: &'a ChainConfig, stage: &'a StageConfig) -> Job<'a> {
    Job { bench, stage, eval: &cfg.eval, distill: &cfg.makd, weighting: &cfg.weighting, teacher: None }
}

/// Trains the head, then distills and co-trains each next size with the
/// previous refined model as its teacher.
pub fn run_chain(
    spec: &ChainSpec,
    cfg: &ChainConfig,
    bench: &Benchmark,
    observer: &mut dyn FnMut(StageOutcome<'_>) -> Result<(), TrainError>,
) -> Result<ChainReport, TrainError> {
    spec.validate()?;
    let s1 = cfg.stage_config(Stage::S1, 0);
    let head = AgentModel::new(spec.models[0].clone(), cfg.init_seed(0))?;
    let (head, report) = train_teacher(head, &job(bench, cfg, &s1))?;
    observer(StageOutcome { link: 0, stage: Stage::S1, report: &report, models: vec![("teacher", &head)] })?;
    let mut out = continue_chain(head, spec, cfg, bench, observer)?;
    out.stages.insert(0, (0, report));
    Ok(out)
}

/// The links of [`run_chain`] after the head, starting from an already
/// trained head whose configuration matches `spec.models[0]`.
pub fn continue_chain(
    head: AgentModel,
    spec: &ChainSpec,
    cfg: &ChainConfig,
    bench: &Benchmark,
    observer: &mut dyn FnMut(StageOutcome<'_>) -> Result<(), TrainError>,
) -> Result<ChainReport, TrainError> {
    spec.validate()?;
    if head.config != spec.models[0] {
        return Err(TrainError::Config("head does not match the first model of the chain".into()));
    }
    let mut stages = Vec::new();
    let mut models = vec![head];
    for (i, student_cfg) in spec.models.iter().enumerate().skip(1) {
        let teacher = models.pop().expect("chain keeps its current teacher");
        let s2 = cfg.stage_config(Stage::S2, i);
        let student = AgentModel::new(student_cfg.clone(), cfg.init_seed(i))?;
        let (student, adapters, report) = distill_student(student, &Job { teacher: Some(&teacher), ..job(bench, cfg, &s2) })?;
        observer(StageOutcome { link: i, stage: Stage::S2, report: &report, models: vec![("student", &student)] })?;
        stages.push((i, report));
        let (teacher, student) = if cfg.cotrain_enabled {
            let s3 = cfg.stage_config(Stage::S3, i);
            let (t, s, report) = cotrain(teacher, student, adapters, &job(bench, cfg, &s3))?;
            observer(StageOutcome {
                link: i,
                stage: Stage::S3,
                report: &report,
                models: vec![("teacher", &t), ("student", &s)],
            })?;
            stages.push((i, report));
            (t, s)
        } else {
            (teacher, student)
        };
        models.push(teacher);
        models.push(student);
    }
    Ok(ChainReport { models, stages })
}
