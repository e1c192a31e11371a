use serde::{Deserialize, Serialize};

use super::observe::direction_bucket;
use super::{EnvError, SceneGraph, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstructionParams {
    /// Number of immediate back-and-forth moves (a → b → a) tolerated.
    pub max_backtracks: usize,
}

impl Default for InstructionParams {
    fn default() -> Self {
        Self { max_backtracks: 0 }
    }
}

/// Encodes a walk as tokens. Each hop emits the direction bucket of the turn
/// relative to the current heading followed by the landmark of the node
/// reached; the goal landmark is then repeated and the end token appended.
///
/// Rejects walks whose encoding would be ambiguous, i.e. where another
/// neighbor shares both the direction bucket and landmark of a hop.
pub fn synthesize_instruction(
    scene: &SceneGraph,
    path: &[usize],
    start_heading: f64,
    vocab: &Vocabulary,
    params: &InstructionParams,
) -> Result<Vec<usize>, EnvError> {
    if path.is_empty() {
        return Err(EnvError::InvalidPath("empty walk".into()));
    }
    if let Some(bad) = path.iter().find(|&&n| n >= scene.len()) {
        return Err(EnvError::InvalidPath(format!("node {bad} not in scene")));
    }
    scene.walk_length(path)?;
    let backtracks = path.windows(3).filter(|w| w[0] == w[2]).count();
    if backtracks > params.max_backtracks {
        return Err(EnvError::Rejected(format!(
            "{backtracks} immediate reversals exceed the limit of {}",
            params.max_backtracks
        )));
    }
    if path.len() == 1 {
        return Ok(vec![Vocabulary::END]);
    }
    let mut tokens = Vec::with_capacity(2 * path.len() + 1);
    let mut heading = start_heading;
    for hop in path.windows(2) {
        let (from, to) = (hop[0], hop[1]);
        let b = scene.bearing(from, to);
        let bucket = direction_bucket(b - heading);
        let lm = scene.node(to).landmark;
        let clash = scene
            .neighbors(from)
            .iter()
            .any(|&o| o != to && scene.node(o).landmark == lm && direction_bucket(scene.bearing(from, o) - heading) == bucket);
        if clash {
            return Err(EnvError::Rejected(format!("hop {from}→{to} is not uniquely described")));
        }
        tokens.push(vocab.direction(bucket));
        tokens.push(vocab.landmark(lm));
        heading = b;
    }
    let goal = *path.last().unwrap();
    tokens.push(vocab.landmark(scene.node(goal).landmark));
    tokens.push(Vocabulary::END);
    Ok(tokens)
}
