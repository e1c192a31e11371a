//! Procedurally generated graph navigation world: scenes, panoramic
//! observations, token instructions, and episodes.

mod benchmark;
mod episode;
mod instruction;
pub mod io;
mod observe;
mod scene;

pub use benchmark::{Benchmark, BenchmarkParams, Split};
pub use episode::{sample_episode, Episode, EpisodeParams};
pub use instruction::{synthesize_instruction, InstructionParams};
pub use observe::{
    direction_bucket, move_to, observe, orientation, slot_center, Candidate, ObservationModel, Panorama, Pose,
    ViewSlot, N_SLOTS, SECTOR,
};
pub use scene::{bearing, distance, generate_scene, SceneGraph, SceneNode, SceneParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("instruction rejected: {0}")]
    Rejected(String),
    #[error("episode sampling failed: {0}")]
    Sampling(String),
    #[error("invalid scene data: {0}")]
    Invalid(String),
    #[error("unsupported scene file version {0}")]
    Version(u32),
    #[error("scene file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token layout: four specials, one token per direction bucket, then one per
/// landmark. Ids are dense in `[0, size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub n_landmarks: usize,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BEGIN: usize = 1;
    pub const END: usize = 2;
    pub const STOP_HINT: usize = 3;
    const FIRST_DIRECTION: usize = 4;

    pub fn new(n_landmarks: usize) -> Self {
        Self { n_landmarks }
    }

    pub fn direction(&self, bucket: usize) -> usize {
        debug_assert!(bucket < N_SLOTS);
        Self::FIRST_DIRECTION + bucket
    }

    pub fn landmark(&self, id: usize) -> usize {
        debug_assert!(id < self.n_landmarks);
        Self::FIRST_DIRECTION + N_SLOTS + id
    }

    pub fn as_direction(&self, token: usize) -> Option<usize> {
        (Self::FIRST_DIRECTION..Self::FIRST_DIRECTION + N_SLOTS)
            .contains(&token)
            .then(|| token - Self::FIRST_DIRECTION)
    }

    pub fn as_landmark(&self, token: usize) -> Option<usize> {
        let first = Self::FIRST_DIRECTION + N_SLOTS;
        (first..first + self.n_landmarks).contains(&token).then(|| token - first)
    }

    pub fn size(&self) -> usize {
        Self::FIRST_DIRECTION + N_SLOTS + self.n_landmarks
    }
}
