//! Versioned JSON scene/episode documents.
//!
//! A document is `{"version":1,"scene":{…},"episodes":[…]}`. A split file
//! holds one document per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::benchmark::Split;
use super::episode::Episode;
use super::scene::{SceneGraph, SceneNode};
use super::EnvError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub landmark: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub scene_id: u64,
    pub n_landmarks: usize,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub scene: SceneDoc,
    pub episodes: Vec<Episode>,
}

impl From<&SceneGraph> for SceneDoc {
    fn from(s: &SceneGraph) -> Self {
        Self {
            scene_id: s.scene_id,
            n_landmarks: s.n_landmarks,
            nodes: s.nodes().iter().map(|n| NodeDoc { id: n.id, x: n.pos[0], y: n.pos[1], landmark: n.landmark }).collect(),
            edges: s.edges().iter().map(|&(u, v)| [u, v]).collect(),
        }
    }
}

impl SceneDoc {
    pub fn into_scene(self) -> Result<SceneGraph, EnvError> {
        let nodes = self.nodes.iter().map(|n| SceneNode { id: n.id, pos: [n.x, n.y], landmark: n.landmark }).collect();
        SceneGraph::from_parts(self.scene_id, self.n_landmarks, nodes, self.edges.iter().map(|e| (e[0], e[1])).collect())
    }
}

pub fn to_json(scene: &SceneGraph, episodes: &[Episode]) -> Result<String, EnvError> {
    let doc = SceneFile { version: FORMAT_VERSION, scene: scene.into(), episodes: episodes.to_vec() };
    Ok(serde_json::to_string(&doc)?)
}

pub fn from_json(text: &str) -> Result<(SceneGraph, Vec<Episode>), EnvError> {
    let probe: serde_json::Value = serde_json::from_str(text)?;
    let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(EnvError::Version(version));
    }
    let doc: SceneFile = serde_json::from_value(probe)?;
    let scene = doc.scene.into_scene()?;
    for ep in &doc.episodes {
        if ep.scene_id != scene.scene_id {
            return Err(EnvError::Invalid(format!("episode for scene {} inside scene {}", ep.scene_id, scene.scene_id)));
        }
        scene.walk_length(&ep.path)?;
    }
    Ok((scene, doc.episodes))
}

/// Writes a split as one scene document per line.
pub fn write_split(path: &Path, split: &Split) -> Result<(), EnvError> {
    let mut f = fs::File::create(path)?;
    for scene in &split.scenes {
        let eps: Vec<Episode> = split.episodes.iter().filter(|e| e.scene_id == scene.scene_id).cloned().collect();
        writeln!(f, "{}", to_json(scene, &eps)?)?;
    }
    Ok(())
}

/// Reads a split written by [`write_split`]. Episodes are interleaved across
/// scenes round-robin, the order in which the benchmark generates them.
pub fn read_split(path: &Path, name: &str) -> Result<Split, EnvError> {
    let f = fs::File::open(path)?;
    let mut scenes = Vec::new();
    let mut per_scene = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (s, e) = from_json(&line)?;
        scenes.push(s);
        per_scene.push(e.into_iter());
    }
    let mut episodes = Vec::new();
    loop {
        let before = episodes.len();
        episodes.extend(per_scene.iter_mut().filter_map(Iterator::next));
        if episodes.len() == before {
            break;
        }
    }
    Ok(Split { name: name.to_string(), scenes, episodes })
}
