#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use chaindistill::env::{SceneGraph, Split};

pub const TINY: &str = r#"
seed = 3

[benchmark]
world_seed = 3
n_train_scenes = 3
n_unseen_scenes = 4
train_episodes_per_scene = 10
seen_episodes_per_scene = 2
unseen_episodes_per_scene = 25
d_obs = 6

[benchmark.scene]
n_nodes = 12
area_side = 6.0
n_landmarks = 6

[chain.teacher]
max_iters = 8
val_interval = 4
warmup_iters = 2

[chain.distill]
max_iters = 4
val_interval = 2
warmup_iters = 2

[chain.cotrain]
max_iters = 2
val_interval = 1
lr = 2e-4
"#;

/// A walk that stops with probability `1/(deg+1)` at each node and otherwise
/// moves to a uniformly chosen neighbor, for at most `horizon` decisions.
pub fn random_walk<R: Rng>(scene: &SceneGraph, start: usize, horizon: usize, rng: &mut R) -> (Vec<usize>, bool) {
    let mut path = vec![start];
    let mut node = start;
    for _ in 0..horizon {
        let n = scene.neighbors(node);
        if rng.gen_range(0..=n.len()) == 0 {
            return (path, true);
        }
        node = *n.choose(rng).unwrap();
        path.push(node);
    }
    (path, false)
}

/// Monte Carlo success rate of [`random_walk`] over every episode of `split`.
pub fn random_policy_sr<R: Rng>(split: &Split, horizon: usize, threshold: f64, trials: usize, rng: &mut R) -> f64 {
    let mut hits = 0usize;
    for _ in 0..trials {
        for ep in &split.episodes {
            let scene = split.scene_of(ep);
            let (path, stopped) = random_walk(scene, ep.start, horizon, rng);
            if stopped && scene.geodesic(*path.last().unwrap(), ep.goal) <= threshold {
                hits += 1;
            }
        }
    }
    hits as f64 / (trials * split.episodes.len()) as f64
}
