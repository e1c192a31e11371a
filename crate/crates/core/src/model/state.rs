use std::collections::BTreeMap;

use super::ModelError;
use crate::autodiff::Var;
use crate::env::{move_to, Pose, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Stop,
    /// Move to a node: one hop for a neighbor, the shortest known route otherwise.
    Goto(usize),
}

/// Aggregated panorama feature recorded at one step.
#[derive(Debug, Clone, Copy)]
pub struct MemoryEntry {
    pub node: usize,
    pub step: usize,
    pub feature: Var,
}

/// Per-episode navigation memory of one model. Feature handles live on the
/// episode's tape.
#[derive(Debug, Clone)]
pub struct NavState {
    pub pose: Pose,
    /// Decisions taken so far.
    pub step: usize,
    /// Distinct visited nodes in first-visit order.
    pub visited: Vec<usize>,
    pub memory: Vec<MemoryEntry>,
    /// Observed but unvisited nodes with the encoded view they were last seen in.
    pub frontier: BTreeMap<usize, Var>,
    /// Every node occupied, including those passed through on multi-hop moves.
    pub trajectory: Vec<usize>,
    pub stopped: bool,
}

impl NavState {
    pub fn new(start: Pose) -> Self {
        Self {
            pose: start,
            step: 0,
            visited: vec![start.node],
            memory: Vec::new(),
            frontier: BTreeMap::new(),
            trajectory: vec![start.node],
            stopped: false,
        }
    }

    pub fn is_visited(&self, node: usize) -> bool {
        self.visited.contains(&node)
    }

    /// Index into `memory` of the latest entry for `node`.
    pub fn latest_memory(&self, node: usize) -> Option<usize> {
        self.memory.iter().rposition(|m| m.node == node)
    }

    /// Executes a decision. Moving marks the destination visited and drops it
    /// from the frontier; nodes passed through on the way are left as they were.
    pub fn apply(&mut self, scene: &SceneGraph, action: Action) -> Result<(), ModelError> {
        if self.stopped {
            return Err(ModelError::Contract("action applied after stop".into()));
        }
        self.step += 1;
        match action {
            Action::Stop => self.stopped = true,
            Action::Goto(target) => {
                if target >= scene.len() {
                    return Err(ModelError::Contract(format!("target {target} not in scene")));
                }
                let (pose, walk) = move_to(scene, self.pose, target);
                self.pose = pose;
                self.trajectory.extend(walk);
                if !self.is_visited(target) {
                    self.visited.push(target);
                }
                self.frontier.remove(&target);
            }
        }
        Ok(())
    }

    /// Checks `visited ∩ frontier = ∅` and `current ∈ visited`.
    pub fn check_invariants(&self) -> Result<(), ModelError> {
        if !self.is_visited(self.pose.node) {
            return Err(ModelError::Contract(format!("current node {} not visited", self.pose.node)));
        }
        if let Some(n) = self.visited.iter().find(|n| self.frontier.contains_key(n)) {
            return Err(ModelError::Contract(format!("node {n} both visited and in frontier")));
        }
        Ok(())
    }
}
