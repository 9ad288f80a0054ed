//! Append-only annotation log. Each record is one JSON line, synced to disk
//! before the submission is acknowledged; the index is rebuilt on open.

use crate::session::{Aspect, Mode};
use crate::HumanEvalError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Preference relative to what the annotator saw: `A` is the left slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
    #[serde(rename = "tie")]
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: String,
    pub item_id: String,
    pub annotator_id: String,
    pub mode: Mode,
    /// System ids in the order they were shown.
    pub shown: Vec<String>,
    pub swapped: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<Aspect, u8>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub preferences: BTreeMap<Aspect, Preference>,
    pub timestamp_ms: u64,
}

impl AnnotationRecord {
    /// Preferred system for an aspect after undoing the blinding; `None`
    /// means a tie or no judgement.
    pub fn preferred_system(&self, aspect: Aspect) -> Option<Option<&str>> {
        let p = self.preferences.get(&aspect)?;
        Some(match p {
            Preference::A => Some(self.shown[0].as_str()),
            Preference::B => Some(self.shown[1].as_str()),
            Preference::Tie => None,
        })
    }
}

/// Test hook: fail after the line is durable but before the ack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    AfterWrite,
}

#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: File,
    records: Vec<AnnotationRecord>,
    answered: HashSet<String>,
    fault: Option<Fault>,
}

impl AnnotationLog {
    /// Opens or creates the log. A torn final line (no trailing newline)
    /// is a write that never acked and is cut off.
    pub fn open(path: &Path) -> Result<Self, HumanEvalError> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of torn trailing record",
                path.display(),
                bytes.len() - complete
            );
            file.set_len(complete as u64)?;
            file.sync_all()?;
        }
        let text = std::str::from_utf8(&bytes[..complete])
            .map_err(|e| HumanEvalError::Corrupt(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        let mut answered = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| {
                HumanEvalError::Corrupt(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            if answered.insert(rec.task_id.clone()) {
                records.push(rec);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records,
            answered,
            fault: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn is_answered(&self, task_id: &str) -> bool {
        self.answered.contains(task_id)
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn append(&mut self, record: AnnotationRecord) -> Result<(), HumanEvalError> {
        if self.answered.contains(&record.task_id) {
            return Err(HumanEvalError::Duplicate(record.task_id));
        }
        let mut line = serde_json::to_string(&record)
            .map_err(|e| HumanEvalError::Corrupt(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        if self.fault == Some(Fault::AfterWrite) {
            return Err(HumanEvalError::Injected);
        }
        self.answered.insert(record.task_id.clone());
        self.records.push(record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn likert(task: &str) -> AnnotationRecord {
        AnnotationRecord {
            task_id: task.into(),
            item_id: "i".into(),
            annotator_id: "a".into(),
            mode: Mode::Likert,
            shown: vec!["cfeg".into()],
            swapped: false,
            scores: BTreeMap::from([
                (Aspect::Coherence, 4),
                (Aspect::Empathy, 5),
                (Aspect::Informative, 4),
                (Aspect::Fluency, 5),
            ]),
            preferences: BTreeMap::new(),
            timestamp_ms: 1,
        }
    }

    #[test]
    fn round_trip_and_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = AnnotationLog::open(&path).unwrap();
        log.append(likert("t1")).unwrap();
        assert!(matches!(log.append(likert("t1")), Err(HumanEvalError::Duplicate(_))));
        drop(log);
        let log = AnnotationLog::open(&path).unwrap();
        assert_eq!(log.records(), [likert("t1")]);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = AnnotationLog::open(&path).unwrap();
        log.append(likert("t1")).unwrap();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"task_id\":\"t2\",\"ite").unwrap();
        drop(f);
        let mut log = AnnotationLog::open(&path).unwrap();
        assert_eq!(log.records().len(), 1);
        log.append(likert("t2")).unwrap();
        drop(log);
        assert_eq!(AnnotationLog::open(&path).unwrap().records().len(), 2);
    }

    #[test]
    fn crash_after_write_keeps_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = AnnotationLog::open(&path).unwrap();
        log.inject_fault(Some(Fault::AfterWrite));
        assert!(matches!(log.append(likert("t1")), Err(HumanEvalError::Injected)));
        drop(log);
        let mut log = AnnotationLog::open(&path).unwrap();
        assert_eq!(log.records(), [likert("t1")]);
        // the client retries after the lost ack
        assert!(matches!(log.append(likert("t1")), Err(HumanEvalError::Duplicate(_))));
        drop(log);
        assert_eq!(AnnotationLog::open(&path).unwrap().records().len(), 1);
    }

    #[test]
    fn preference_deblinding() {
        let mut r = likert("t");
        r.mode = Mode::AbPair;
        r.shown = vec!["base".into(), "cfeg".into()];
        r.preferences.insert(Aspect::Empathy, Preference::B);
        r.preferences.insert(Aspect::Coherence, Preference::Tie);
        assert_eq!(r.preferred_system(Aspect::Empathy), Some(Some("cfeg")));
        assert_eq!(r.preferred_system(Aspect::Coherence), Some(None));
        assert_eq!(r.preferred_system(Aspect::Fluency), None);
    }
}
