use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::instruction::{synthesize_instruction, InstructionParams};
use super::{EnvError, SceneGraph, Vocabulary};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub min_hops: usize,
    pub max_hops: usize,
    pub max_instruction_len: usize,
    pub instruction: InstructionParams,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self { min_hops: 2, max_hops: 5, max_instruction_len: 16, instruction: InstructionParams::default() }
    }
}

/// A navigation task: reach `goal` from `start` following `instruction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene_id: u64,
    pub start: usize,
    pub goal: usize,
    pub start_heading: f64,
    /// Ground-truth shortest path, `start` through `goal`.
    pub path: Vec<usize>,
    pub instruction: Vec<usize>,
    pub positions: Vec<usize>,
}

impl Episode {
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }
}

/// Samples a start/goal pair whose shortest path has a hop count within
/// `[min_hops, max_hops]` and attaches its instruction. Deterministic in
/// `(scene, seed)`.
pub fn sample_episode(
    scene: &SceneGraph,
    seed: u64,
    params: &EpisodeParams,
    vocab: &Vocabulary,
) -> Result<Episode, EnvError> {
    const TRIES: usize = 2000;
    if params.min_hops < 1 || params.max_hops < params.min_hops {
        return Err(EnvError::Sampling(format!(
            "hop bounds [{}, {}] are invalid",
            params.min_hops, params.max_hops
        )));
    }
    let mut rng = seed::rng(seed);
    let n = scene.len();
    let mut out_of_range = 0;
    let mut rejected = 0;
    for _ in 0..TRIES {
        let start = rng.gen_range(0..n);
        let goal = rng.gen_range(0..n);
        let heading = rng.gen_range(0.0..TAU);
        if start == goal {
            continue;
        }
        let (path, _) = scene.shortest_path(start, goal);
        let hops = path.len() - 1;
        if hops < params.min_hops || hops > params.max_hops {
            out_of_range += 1;
            continue;
        }
        match synthesize_instruction(scene, &path, heading, vocab, &params.instruction) {
            Ok(instruction) if instruction.len() <= params.max_instruction_len => {
                let positions = (0..instruction.len()).collect();
                return Ok(Episode {
                    scene_id: scene.scene_id,
                    start,
                    goal,
                    start_heading: heading,
                    path,
                    instruction,
                    positions,
                });
            }
            Ok(_) | Err(EnvError::Rejected(_)) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Err(EnvError::Sampling(format!(
        "no episode within {}..={} hops after {TRIES} draws ({out_of_range} out of range, {rejected} rejected instructions)",
        params.min_hops, params.max_hops
    )))
}
