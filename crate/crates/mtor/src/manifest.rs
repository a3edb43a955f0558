//! Append-only run manifest: one JSON event per line, status transitions
//! pending -> running -> {done, failed}. The current state is derived by
//! replaying the log.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ManifestEvent {
    Created { run_id: String, config_hash: String, build: String, time: String },
    Status { status: RunStatus, time: String },
    Checkpoint { path: String },
    MetricsFile { path: String },
    Note { text: String },
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub build: String,
    pub status: Option<RunStatus>,
    pub checkpoints: Vec<String>,
    pub metrics_files: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn build_id() -> String {
    format!("mtor-{}", env!("CARGO_PKG_VERSION"))
}

pub struct ManifestWriter {
    path: PathBuf,
}

impl ManifestWriter {
    pub fn create(run_dir: &Path, run_id: &str, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let w = Self { path: run_dir.join(MANIFEST_FILE) };
        w.append(&ManifestEvent::Created {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            build: build_id(),
            time: now(),
        })?;
        w.append(&ManifestEvent::Status { status: RunStatus::Pending, time: now() })?;
        Ok(w)
    }

    pub fn open(run_dir: &Path) -> Self {
        Self { path: run_dir.join(MANIFEST_FILE) }
    }

    pub fn append(&self, event: &ManifestEvent) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening manifest {}", self.path.display()))?;
        writeln!(f, "{}", serde_json::to_string(event)?)?;
        Ok(())
    }

    /// Record a status change, enforcing the pending -> running -> {done,
    /// failed} transition order.
    pub fn set_status(&self, status: RunStatus) -> Result<()> {
        let current = read_manifest(self.path.parent().unwrap())?.status;
        let ok = matches!(
            (current, status),
            (Some(RunStatus::Pending), RunStatus::Running)
                | (Some(RunStatus::Running), RunStatus::Done)
                | (Some(RunStatus::Running), RunStatus::Failed)
                | (Some(RunStatus::Failed), RunStatus::Running)
        );
        if !ok {
            bail!("invalid status transition {current:?} -> {status:?}");
        }
        self.append(&ManifestEvent::Status { status, time: now() })
    }
}

/// Replay the event log into the current manifest state.
pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut m = RunManifest::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let event: ManifestEvent =
            serde_json::from_str(line).with_context(|| format!("bad manifest line: {line}"))?;
        match event {
            ManifestEvent::Created { run_id, config_hash, build, .. } => {
                m.run_id = run_id;
                m.config_hash = config_hash;
                m.build = build;
            }
            ManifestEvent::Status { status, .. } => m.status = Some(status),
            ManifestEvent::Checkpoint { path } => m.checkpoints.push(path),
            ManifestEvent::MetricsFile { path } => m.metrics_files.push(path),
            ManifestEvent::Note { .. } => {}
        }
    }
    Ok(m)
}
