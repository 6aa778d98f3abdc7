//! Append-only audit trail.
//!
//! Entries are hash-chained: the log digest folds every entry in order, so
//! two logs with the same digest have the same history.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    DatasetImported,
    FindingsDetected,
    QueryCreated,
    QueryEdited,
    QueryApproved,
    QueryRejected,
    QuerySent,
    QueryAnswered,
    QueryClosed,
    SessionStarted,
    DecisionRecorded,
    SessionEnded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: i64,
    pub actor: String,
    pub action: AuditAction,
    pub subject_id: String,
    /// Hex SHA-256 of the mutation payload.
    pub payload_digest: String,
}

impl AuditEntry {
    pub fn new(
        timestamp_ms: i64,
        actor: impl Into<String>,
        action: AuditAction,
        subject_id: impl Into<String>,
        payload: &[u8],
    ) -> Self {
        AuditEntry {
            timestamp_ms,
            actor: actor.into(),
            action,
            subject_id: subject_id.into(),
            payload_digest: hex::encode(Sha256::digest(payload)),
        }
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("out-of-order audit entry for {subject_id}: {timestamp_ms} < last {last_ms}")]
    OutOfOrder {
        subject_id: String,
        timestamp_ms: i64,
        last_ms: i64,
    },
    #[error("audit log io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
    last_by_subject: HashMap<String, i64>,
    chain: [u8; 32],
    sink: Option<PathBuf>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) an NDJSON-backed log. Existing lines are replayed
    /// through the same ordering checks as live appends.
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        let mut log = AuditLog::new();
        if path.exists() {
            let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| io_error(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: AuditEntry = serde_json::from_str(&line).map_err(|e| AuditError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                log.append(entry)?;
            }
        }
        log.sink = Some(path.to_path_buf());
        Ok(log)
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_timestamp(&self, subject_id: &str) -> Option<i64> {
        self.last_by_subject.get(subject_id).copied()
    }

    pub fn append(&mut self, entry: AuditEntry) -> Result<&AuditEntry, AuditError> {
        if let Some(&last_ms) = self.last_by_subject.get(&entry.subject_id) {
            if entry.timestamp_ms < last_ms {
                return Err(AuditError::OutOfOrder {
                    subject_id: entry.subject_id,
                    timestamp_ms: entry.timestamp_ms,
                    last_ms,
                });
            }
        }
        let line = serde_json::to_string(&entry).expect("audit entry serializes");
        if let Some(path) = &self.sink {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| io_error(path, e))?;
            writeln!(file, "{line}").map_err(|e| io_error(path, e))?;
        }
        let mut hasher = Sha256::new();
        hasher.update(self.chain);
        hasher.update(line.as_bytes());
        self.chain = hasher.finalize().into();
        self.last_by_subject
            .insert(entry.subject_id.clone(), entry.timestamp_ms);
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Hex digest of the whole chain.
    pub fn digest(&self) -> String {
        hex::encode(self.chain)
    }

    pub fn for_subject<'a>(&'a self, subject_id: &'a str) -> impl Iterator<Item = &'a AuditEntry> + 'a {
        self.entries.iter().filter(move |e| e.subject_id == subject_id)
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("audit entry serializes"));
            out.push('\n');
        }
        out
    }
}

fn io_error(path: &Path, e: std::io::Error) -> AuditError {
    AuditError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(ts: i64, subject: &str) -> AuditEntry {
        AuditEntry::new(ts, "rev-1", AuditAction::QueryApproved, subject, subject.as_bytes())
    }

    #[test]
    fn append_to_empty_log() {
        let mut log = AuditLog::new();
        log.append(entry(10, "Q1")).unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn decreasing_timestamp_same_subject_rejected() {
        let mut log = AuditLog::new();
        log.append(entry(10, "Q1")).unwrap();
        let err = log.append(entry(9, "Q1")).unwrap_err();
        assert!(matches!(err, AuditError::OutOfOrder { last_ms: 10, .. }));
        assert_eq!(log.len(), 1);
        // other subjects keep their own clock
        log.append(entry(5, "Q2")).unwrap();
        log.append(entry(10, "Q1")).unwrap();
    }

    #[test]
    fn appends_leave_prior_entries_untouched() {
        let mut log = AuditLog::new();
        log.append(entry(1, "A")).unwrap();
        let before = log.entries()[0].clone();
        log.append(entry(2, "B")).unwrap();
        assert_eq!(log.entries()[0], before);
    }

    #[test]
    fn digest_is_replay_deterministic() {
        let build = || {
            let mut log = AuditLog::new();
            for i in 0..1000 {
                log.append(entry(i, &format!("S{}", i % 7))).unwrap();
            }
            log.digest()
        };
        assert_eq!(build(), build());
        let mut other = AuditLog::new();
        for i in 0..1000 {
            other.append(entry(i, &format!("S{}", i % 5))).unwrap();
        }
        assert_ne!(build(), other.digest());
    }

    #[test]
    fn persisted_log_reopens_with_same_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.ndjson");
        let digest = {
            let mut log = AuditLog::open(&path).unwrap();
            for i in 0..20 {
                log.append(entry(i, "Q1")).unwrap();
            }
            log.digest()
        };
        let reopened = AuditLog::open(&path).unwrap();
        assert_eq!(reopened.len(), 20);
        assert_eq!(reopened.digest(), digest);
        assert_eq!(fs::read_to_string(&path).unwrap(), reopened.to_ndjson());
    }
}
