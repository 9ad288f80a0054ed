//! Run manifest: per-stage input/output digests, parameters and backends.

use crate::Failure;
use cfeg_core::digest::{file_sha256, sha256_hex};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params_digest: String,
    /// Path (relative to the run directory when inside it) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub backends: Vec<String>,
    pub seeds: Vec<u64>,
    pub started_at: u64,
    pub finished_at: u64,
    #[serde(default)]
    pub notes: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub config: Value,
    pub stages: BTreeMap<String, StageRecord>,
}

/// What a stage produced.
#[derive(Debug, Default)]
pub struct StageOutcome {
    pub outputs: Vec<PathBuf>,
    pub backends: Vec<String>,
    pub notes: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub struct Workspace {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub force: bool,
}

impl Workspace {
    /// Loads the manifest in `dir`, or starts one. A changed config keeps
    /// stage records; stale stages rerun because their params differ.
    pub fn open(dir: &Path, config: Value, force: bool) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let config_digest = sha256_hex(serde_json::to_string(&config)?);
        let path = dir.join(MANIFEST_FILE);
        let mut manifest = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| Failure::Digest(format!("{}: unreadable manifest: {e}", path.display())))?
        } else {
            RunManifest::default()
        };
        manifest.run_id = config_digest[..12].to_string();
        manifest.config_digest = config_digest;
        manifest.config = config;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            force,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn key(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    fn save(&self) -> anyhow::Result<()> {
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        std::fs::rename(tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Digest of `path`, checked against whichever earlier stage wrote it.
    fn checked_input(&self, stage: &str, path: &Path) -> anyhow::Result<String> {
        if !path.exists() {
            anyhow::bail!("{stage}: input {} does not exist; run the producing stage first", path.display());
        }
        let digest = file_sha256(path)?;
        let key = self.key(path);
        for (producer, rec) in &self.manifest.stages {
            if producer == stage {
                continue;
            }
            if let Some(recorded) = rec.outputs.get(&key) {
                if *recorded != digest {
                    return Err(Failure::Digest(format!(
                        "{stage}: {key} was written by {producer} with digest {recorded} but now hashes to {digest}"
                    ))
                    .into());
                }
            }
        }
        Ok(digest)
    }

    fn up_to_date(&self, stage: &str, params: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return false;
        };
        rec.params_digest == params
            && rec.inputs == *inputs
            && rec.outputs.iter().all(|(k, d)| {
                let p = self.dir.join(k);
                p.exists() && file_sha256(&p).is_ok_and(|x| x == *d)
            })
    }

    /// Runs `body` unless an identical earlier run of `stage` is on disk.
    pub fn stage(
        &mut self,
        stage: &str,
        inputs: &[PathBuf],
        params: &Value,
        seeds: Vec<u64>,
        body: impl FnOnce(&Self) -> anyhow::Result<StageOutcome>,
    ) -> anyhow::Result<StageStatus> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(self.key(p), self.checked_input(stage, p)?);
        }
        let params_digest = sha256_hex(serde_json::to_string(params)?);
        if !self.force && self.up_to_date(stage, &params_digest, &digests) {
            log::info!("{stage}: inputs unchanged, skipping");
            return Ok(StageStatus::Skipped);
        }
        let started_at = now_secs();
        log::info!("{stage}: running");
        let outcome = body(self)?;
        let mut outputs = BTreeMap::new();
        for p in &outcome.outputs {
            outputs.insert(self.key(p), file_sha256(p)?);
        }
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                params_digest,
                inputs: digests,
                outputs,
                backends: outcome.backends,
                seeds,
                started_at,
                finished_at: now_secs(),
                notes: outcome.notes,
            },
        );
        self.save()?;
        Ok(StageStatus::Ran)
    }
}
