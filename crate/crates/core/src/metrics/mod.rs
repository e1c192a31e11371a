//! Navigation quality: success, SPL, navigation error and oracle success.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::SceneGraph;

/// Default success radius in meters.
pub const DEFAULT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty split")]
    Empty,
    #[error("invalid episode result: {0}")]
    Invalid(String),
}

/// Outcome of one navigation episode with the geodesic quantities the
/// metrics need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scene_id: u64,
    /// Every node occupied, in order, starting at the start node.
    pub path: Vec<usize>,
    pub goal: usize,
    /// False when the episode ended at the horizon without a stop.
    pub stopped: bool,
    /// Geodesic distance from the final node to the goal.
    pub final_distance: f64,
    /// Smallest geodesic distance to the goal over the path.
    pub closest_distance: f64,
    pub executed_length: f64,
    pub shortest_length: f64,
}

impl EpisodeResult {
    pub fn new(scene: &SceneGraph, path: Vec<usize>, goal: usize, stopped: bool) -> Result<Self, MetricsError> {
        let (&start, &end) = match (path.first(), path.last()) {
            (Some(s), Some(e)) => (s, e),
            _ => return Err(MetricsError::Invalid("empty path".into())),
        };
        if goal >= scene.len() || path.iter().any(|&n| n >= scene.len()) {
            return Err(MetricsError::Invalid(format!("node outside scene of {}", scene.len())));
        }
        let executed_length = scene.walk_length(&path).map_err(|e| MetricsError::Invalid(e.to_string()))?;
        let closest_distance = path.iter().map(|&n| scene.geodesic(n, goal)).fold(f64::INFINITY, f64::min);
        Ok(Self {
            scene_id: scene.scene_id,
            final_distance: scene.geodesic(end, goal),
            closest_distance,
            executed_length,
            shortest_length: scene.geodesic(start, goal),
            path,
            goal,
            stopped,
        })
    }

    pub fn stop_node(&self) -> usize {
        *self.path.last().expect("non-empty path")
    }
}

pub fn navigation_error(r: &EpisodeResult) -> f64 {
    r.final_distance
}

/// 1 when the agent stopped within `threshold` (inclusive) of the goal.
pub fn success(r: &EpisodeResult, threshold: f64) -> f64 {
    if r.stopped && r.final_distance <= threshold {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_success(r: &EpisodeResult, threshold: f64) -> f64 {
    if r.closest_distance <= threshold {
        1.0
    } else {
        0.0
    }
}

/// Success weighted by `ℓ* / max(ℓ, ℓ*)`; a zero-length episode scores its success.
pub fn spl(r: &EpisodeResult, threshold: f64) -> f64 {
    let s = success(r, threshold);
    let longest = r.executed_length.max(r.shortest_length);
    if longest == 0.0 {
        s
    } else {
        s * r.shortest_length / longest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub osr: f64,
    pub n_episodes: usize,
}

pub fn aggregate(results: &[EpisodeResult], threshold: f64) -> Result<MetricsSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(MetricsSummary {
        sr: mean(&|r| success(r, threshold)),
        spl: mean(&|r| spl(r, threshold)),
        ne: mean(&navigation_error),
        osr: mean(&|r| oracle_success(r, threshold)),
        n_episodes: results.len(),
    })
}

#[cfg(test)]
mod tests;
