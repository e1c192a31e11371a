use serde::{Deserialize, Serialize};

use super::episode::{sample_episode, Episode, EpisodeParams};
use super::observe::ObservationModel;
use super::scene::{generate_scene, SceneGraph, SceneParams};
use super::{EnvError, Vocabulary};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub world_seed: u64,
    pub scene: SceneParams,
    pub episode: EpisodeParams,
    pub n_train_scenes: usize,
    pub n_unseen_scenes: usize,
    pub train_episodes_per_scene: usize,
    pub seen_episodes_per_scene: usize,
    pub unseen_episodes_per_scene: usize,
    pub d_obs: usize,
    pub obs_noise: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            world_seed: 7,
            scene: SceneParams::default(),
            episode: EpisodeParams::default(),
            n_train_scenes: 20,
            n_unseen_scenes: 5,
            train_episodes_per_scene: 100,
            seen_episodes_per_scene: 5,
            unseen_episodes_per_scene: 20,
            d_obs: 16,
            obs_noise: 0.1,
        }
    }
}

/// Scenes plus the episodes drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub scenes: Vec<SceneGraph>,
    pub episodes: Vec<Episode>,
}

impl Split {
    pub fn scene(&self, scene_id: u64) -> Option<&SceneGraph> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn scene_of(&self, ep: &Episode) -> &SceneGraph {
        self.scene(ep.scene_id).expect("episode references a scene outside its split")
    }

    /// A split restricted to its first `n` episodes.
    pub fn truncated(&self, n: usize) -> Split {
        Split { name: self.name.clone(), scenes: self.scenes.clone(), episodes: self.episodes.iter().take(n).cloned().collect() }
    }
}

/// Train / seen-validation / unseen-validation splits. Seen validation reuses
/// the training scenes with fresh episodes; unseen scenes come from a
/// disjoint seed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub params: BenchmarkParams,
    pub vocab: Vocabulary,
    pub observation: ObservationModel,
    pub train: Split,
    pub val_seen: Split,
    pub val_unseen: Split,
}

fn episodes(scenes: &[SceneGraph], label: &str, per_scene: usize, p: &BenchmarkParams, vocab: &Vocabulary) -> Result<Vec<Episode>, EnvError> {
    let mut out = Vec::with_capacity(scenes.len() * per_scene);
    for j in 0..per_scene {
        for s in scenes {
            out.push(sample_episode(s, seed::derive(s.scene_id, label, j as u64), &p.episode, vocab)?);
        }
    }
    Ok(out)
}

impl Benchmark {
    pub fn generate(p: &BenchmarkParams) -> Result<Self, EnvError> {
        let vocab = Vocabulary::new(p.scene.n_landmarks);
        let observation = ObservationModel::new(p.world_seed, p.scene.n_landmarks, p.d_obs, p.obs_noise);
        let train_scenes = (0..p.n_train_scenes)
            .map(|i| generate_scene(seed::derive(p.world_seed, "train-scene", i as u64), &p.scene))
            .collect::<Result<Vec<_>, _>>()?;
        let unseen_scenes = (0..p.n_unseen_scenes)
            .map(|i| generate_scene(seed::derive(p.world_seed, "unseen-scene", i as u64), &p.scene))
            .collect::<Result<Vec<_>, _>>()?;
        let train = Split {
            name: "train".into(),
            episodes: episodes(&train_scenes, "train-episode", p.train_episodes_per_scene, p, &vocab)?,
            scenes: train_scenes.clone(),
        };
        let val_seen = Split {
            name: "val_seen".into(),
            episodes: episodes(&train_scenes, "seen-episode", p.seen_episodes_per_scene, p, &vocab)?,
            scenes: train_scenes,
        };
        let val_unseen = Split {
            name: "val_unseen".into(),
            episodes: episodes(&unseen_scenes, "unseen-episode", p.unseen_episodes_per_scene, p, &vocab)?,
            scenes: unseen_scenes,
        };
        Ok(Self { params: *p, vocab, observation, train, val_seen, val_unseen })
    }

    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val_seen" => Some(&self.val_seen),
            "val_unseen" => Some(&self.val_unseen),
            _ => None,
        }
    }
}
