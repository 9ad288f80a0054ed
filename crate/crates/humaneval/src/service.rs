//! Session state shared by the HTTP handlers.

use crate::session::{Aspect, Mode, Session, TaskView};
use crate::store::{AnnotationLog, AnnotationRecord, Fault, Preference};
use crate::HumanEvalError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

/// Client payload for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub scores: BTreeMap<Aspect, u8>,
    #[serde(default)]
    pub preferences: BTreeMap<Aspect, Preference>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: String,
    pub accepted: bool,
}

pub struct EvalService {
    session: Session,
    log: Mutex<AnnotationLog>,
    snapshot: RwLock<Arc<Vec<AnnotationRecord>>>,
}

fn session_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.session.json"))
}

fn log_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.annotations.jsonl"))
}

impl EvalService {
    /// Persists a new session under `dir`; an existing id is an error.
    pub fn create(dir: &Path, session: Session) -> Result<Self, HumanEvalError> {
        std::fs::create_dir_all(dir)?;
        let path = session_path(dir, &session.session_id);
        let file = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    HumanEvalError::DuplicateSession(session.session_id.clone())
                }
                _ => e.into(),
            })?;
        serde_json::to_writer_pretty(&file, &session)
            .map_err(|e| HumanEvalError::Corrupt(e.to_string()))?;
        file.sync_all()?;
        Self::with_log(dir, session)
    }

    pub fn open(dir: &Path, session_id: &str) -> Result<Self, HumanEvalError> {
        let path = session_path(dir, session_id);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HumanEvalError::UnknownSession(session_id.into()),
            _ => e.into(),
        })?;
        let session: Session = serde_json::from_str(&text)
            .map_err(|e| HumanEvalError::Corrupt(format!("{}: {e}", path.display())))?;
        Self::with_log(dir, session)
    }

    fn with_log(dir: &Path, session: Session) -> Result<Self, HumanEvalError> {
        let log = AnnotationLog::open(&log_path(dir, &session.session_id))?;
        let snapshot = RwLock::new(Arc::new(log.records().to_vec()));
        Ok(Self {
            session,
            log: Mutex::new(log),
            snapshot,
        })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn records(&self) -> Arc<Vec<AnnotationRecord>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.log.lock().expect("log lock").inject_fault(fault);
    }

    /// Blinded tasks assigned to `annotator`, in session order.
    pub fn tasks_for(&self, annotator: &str) -> Vec<TaskView> {
        let records = self.records();
        let done: HashSet<&str> = records.iter().map(|r| r.task_id.as_str()).collect();
        self.session
            .tasks
            .iter()
            .filter(|t| t.annotator_id == annotator)
            .map(|t| self.session.view(t, done.contains(t.task_id.as_str())))
            .collect()
    }

    pub fn submit(&self, sub: Submission) -> Result<Ack, HumanEvalError> {
        let task = self
            .session
            .task(&sub.task_id)
            .filter(|t| t.annotator_id == sub.annotator_id)
            .ok_or_else(|| HumanEvalError::UnknownTask(sub.task_id.clone()))?;
        match task.mode {
            Mode::Likert => {
                if !sub.preferences.is_empty() {
                    return Err(HumanEvalError::Invalid("likert task takes scores only".into()));
                }
                for aspect in Aspect::ALL {
                    let score = *sub.scores.get(&aspect).ok_or_else(|| {
                        HumanEvalError::Invalid(format!("missing score for {aspect}"))
                    })?;
                    if !(1..=5).contains(&score) {
                        return Err(HumanEvalError::ScoreRange { aspect, score });
                    }
                }
            }
            Mode::AbPair => {
                if !sub.scores.is_empty() || sub.preferences.is_empty() {
                    return Err(HumanEvalError::Invalid(
                        "A/B task takes one or more preferences only".into(),
                    ));
                }
            }
        }
        let record = AnnotationRecord {
            task_id: task.task_id.clone(),
            item_id: task.item_id.clone(),
            annotator_id: task.annotator_id.clone(),
            mode: task.mode,
            shown: task.shown.clone(),
            swapped: task.swapped,
            scores: sub.scores,
            preferences: sub.preferences,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        let mut log = self.log.lock().expect("log lock");
        log.append(record)?;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(log.records().to_vec());
        Ok(Ack {
            task_id: sub.task_id,
            accepted: true,
        })
    }
}
