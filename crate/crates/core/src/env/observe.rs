use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{EnvError, SceneGraph};
use crate::seed;

pub const N_SLOTS: usize = 12;
/// Angular width of a view slot and of a direction bucket.
pub const SECTOR: f64 = TAU / N_SLOTS as f64;

/// Index of the slot whose center is nearest the relative angle `rel`.
pub fn direction_bucket(rel: f64) -> usize {
    ((rel.rem_euclid(TAU) / SECTOR).round() as usize) % N_SLOTS
}

/// Relative angle of the center of slot `k`.
pub fn slot_center(k: usize) -> f64 {
    k as f64 * SECTOR
}

/// Orientation 4-vector (sin θ, cos θ, sin φ, cos φ) with elevation φ = 0.
pub fn orientation(theta: f64) -> [f64; 4] {
    [theta.sin(), theta.cos(), 0.0, 1.0]
}

/// Fixed appearance of each landmark and of bare walls, shared by every
/// scene in a world so that appearance generalizes across scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub d_obs: usize,
    pub sigma: f64,
    landmark_features: Vec<Vec<f64>>,
    wall: Vec<f64>,
}

impl ObservationModel {
    pub fn new(world_seed: u64, n_landmarks: usize, d_obs: usize, sigma: f64) -> Self {
        let mut rng = seed::child_rng(world_seed, "appearance", 0);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d_obs).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let landmark_features = (0..n_landmarks).map(|_| draw(&mut rng)).collect();
        let wall = draw(&mut rng);
        Self { d_obs, sigma, landmark_features, wall }
    }

    pub fn landmark_feature(&self, id: usize) -> &[f64] {
        &self.landmark_features[id]
    }

    pub fn wall_feature(&self) -> &[f64] {
        &self.wall
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_features.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSlot {
    pub feature: Vec<f64>,
    pub orientation: [f64; 4],
    /// Node shown in this slot, if any.
    pub visible: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub node: usize,
    pub slot: usize,
    pub orientation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub node: usize,
    pub heading: f64,
    pub slots: Vec<ViewSlot>,
    pub candidates: Vec<Candidate>,
}

impl Panorama {
    pub fn candidate_index(&self, node: usize) -> Option<usize> {
        self.candidates.iter().position(|c| c.node == node)
    }
}

/// Panoramic observation at `node` facing `heading`.
///
/// Slot `k` covers relative angles within half a sector of `k · 30°`. It shows
/// the landmark of the nearest neighbor in that sector, or the wall feature
/// when the sector is empty, plus Gaussian noise of scale `model.sigma`.
/// Candidates list every neighbor once, ordered by slot, then distance, then id.
pub fn observe<R: Rng>(
    scene: &SceneGraph,
    model: &ObservationModel,
    node: usize,
    heading: f64,
    rng: &mut R,
) -> Result<Panorama, EnvError> {
    if node >= scene.len() {
        return Err(EnvError::Invalid(format!("node {node} not in scene of {}", scene.len())));
    }
    if !(0.0..TAU).contains(&heading) {
        return Err(EnvError::Invalid(format!("heading {heading} outside [0, 2π)")));
    }
    let mut candidates: Vec<(Candidate, f64)> = scene
        .neighbors(node)
        .iter()
        .map(|&nb| {
            let rel = (scene.bearing(node, nb) - heading).rem_euclid(TAU);
            let c = Candidate { node: nb, slot: direction_bucket(rel), orientation: orientation(rel) };
            (c, scene.edge_length(node, nb))
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.0.slot.cmp(&b.0.slot).then(a.1.total_cmp(&b.1)).then(a.0.node.cmp(&b.0.node))
    });
    let mut slots = Vec::with_capacity(N_SLOTS);
    for k in 0..N_SLOTS {
        let visible = candidates.iter().find(|c| c.0.slot == k).map(|c| c.0.node);
        let base = match visible {
            Some(nb) => model.landmark_feature(scene.node(nb).landmark),
            None => model.wall_feature(),
        };
        let feature = base
            .iter()
            .map(|&v| v + model.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        slots.push(ViewSlot { feature, orientation: orientation(slot_center(k)), visible });
    }
    Ok(Panorama { node, heading, slots, candidates: candidates.into_iter().map(|c| c.0).collect() })
}

/// Agent position and facing direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub node: usize,
    pub heading: f64,
}

/// Moves toward `target`: one hop when adjacent, otherwise along the
/// shortest path. Returns the new pose and the nodes traversed after the
/// starting node. The agent ends facing along its last hop.
pub fn move_to(scene: &SceneGraph, pose: Pose, target: usize) -> (Pose, Vec<usize>) {
    if target == pose.node {
        return (pose, Vec::new());
    }
    let walk = if scene.are_adjacent(pose.node, target) {
        vec![pose.node, target]
    } else {
        scene.shortest_path(pose.node, target).0
    };
    let n = walk.len();
    let heading = scene.bearing(walk[n - 2], walk[n - 1]);
    (Pose { node: target, heading }, walk[1..].to_vec())
}
