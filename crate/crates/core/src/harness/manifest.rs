//! Append-only run manifest. Wall-clock times go to a sidecar file so that
//! identical runs produce identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::logs::{append_jsonl, read_jsonl};
use super::HarnessError;
use crate::icod::{MetricsRecord, Stage};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const MANIFEST_VERSION: u32 = 1;

/// Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifestEvent {
    Start { version: u32, command: String, config: Box<ExperimentConfig> },
    Warning { message: String },
    StageStart { link: usize, stage: Stage, resumed_at: usize },
    StageEnd {
        link: usize,
        stage: Stage,
        checkpoints: Vec<String>,
        metrics_logs: Vec<String>,
        loss_log: String,
        /// Last validation per model and split.
        final_metrics: BTreeMap<String, BTreeMap<String, MetricsRecord>>,
    },
    Eval { checkpoint: String, metrics: Vec<MetricsRecord> },
    Finish { checkpoints: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    event: usize,
    unix_ms: u128,
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub dir: PathBuf,
    events: usize,
}

impl RunManifest {
    /// Opens the manifest of `dir`, keeping any events already recorded.
    pub fn open(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        let events = if path.exists() { read_jsonl::<ManifestEvent>(&path)?.len() } else { 0 };
        Ok(Self { dir: dir.to_path_buf(), events })
    }

    pub fn append(&mut self, event: &ManifestEvent) -> Result<(), HarnessError> {
        append_jsonl(&self.dir.join(MANIFEST_FILE), event)?;
        let unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        append_jsonl(&self.dir.join(TIMINGS_FILE), &Timing { event: self.events, unix_ms })?;
        self.events += 1;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Vec<ManifestEvent>, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(HarnessError::Missing(format!("no manifest in {}", dir.display())));
        }
        let events: Vec<ManifestEvent> = read_jsonl(&path)?;
        if let Some(ManifestEvent::Start { version, .. }) = events.first() {
            if *version != MANIFEST_VERSION {
                return Err(HarnessError::Format(format!("manifest version {version} is not supported")));
            }
        }
        Ok(events)
    }
}
