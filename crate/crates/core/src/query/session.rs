//! Review sessions: one reviewer's timed pass over a worklist.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirm,
    Dismiss,
}

/// Review condition, so sessions can be paired per reviewer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Baseline,
    Assisted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub finding_id: String,
    pub verdict: Verdict,
    pub timestamp_ms: i64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("finding {0} already decided in this session")]
    Duplicate(String),
    #[error("decision at {timestamp_ms} precedes the previous one at {last_ms}")]
    OutOfOrder { timestamp_ms: i64, last_ms: i64 },
    #[error("decision at {0} precedes the session start")]
    BeforeStart(i64),
    #[error("session has ended")]
    Ended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub reviewer_id: String,
    pub condition: Condition,
    pub started_ms: i64,
    #[serde(default)]
    pub ended_ms: Option<i64>,
    #[serde(default)]
    pub decisions: Vec<Decision>,
}

impl ReviewSession {
    pub fn new(session_id: impl Into<String>, reviewer_id: impl Into<String>, condition: Condition, started_ms: i64) -> Self {
        ReviewSession {
            session_id: session_id.into(),
            reviewer_id: reviewer_id.into(),
            condition,
            started_ms,
            ended_ms: None,
            decisions: Vec::new(),
        }
    }

    /// Appends a decision. Timestamps must not go backwards and each
    /// finding may be decided once.
    pub fn record_decision(
        &mut self,
        finding_id: &str,
        verdict: Verdict,
        timestamp_ms: i64,
    ) -> Result<&Decision, SessionError> {
        if self.ended_ms.is_some() {
            return Err(SessionError::Ended);
        }
        if timestamp_ms < self.started_ms {
            return Err(SessionError::BeforeStart(timestamp_ms));
        }
        if let Some(last) = self.decisions.last() {
            if timestamp_ms < last.timestamp_ms {
                return Err(SessionError::OutOfOrder {
                    timestamp_ms,
                    last_ms: last.timestamp_ms,
                });
            }
        }
        if self.decisions.iter().any(|d| d.finding_id == finding_id) {
            return Err(SessionError::Duplicate(finding_id.to_string()));
        }
        self.decisions.push(Decision {
            finding_id: finding_id.to_string(),
            verdict,
            timestamp_ms,
        });
        Ok(self.decisions.last().expect("just pushed"))
    }

    pub fn end(&mut self, ended_ms: i64) -> Result<(), SessionError> {
        if self.ended_ms.is_some() {
            return Err(SessionError::Ended);
        }
        let floor = self.decisions.last().map_or(self.started_ms, |d| d.timestamp_ms);
        if ended_ms < floor {
            return Err(SessionError::OutOfOrder {
                timestamp_ms: ended_ms,
                last_ms: floor,
            });
        }
        self.ended_ms = Some(ended_ms);
        Ok(())
    }

    /// Elapsed minutes to the end, or to the last decision while open.
    pub fn duration_minutes(&self) -> f64 {
        let end = self
            .ended_ms
            .or_else(|| self.decisions.last().map(|d| d.timestamp_ms))
            .unwrap_or(self.started_ms);
        (end - self.started_ms) as f64 / 60_000.0
    }

    /// Checks the invariants on a deserialized session.
    pub fn validate(&self) -> Result<(), SessionError> {
        let mut seen = HashSet::new();
        let mut last = self.started_ms;
        for d in &self.decisions {
            if d.timestamp_ms < last {
                return Err(if last == self.started_ms && d.timestamp_ms < self.started_ms {
                    SessionError::BeforeStart(d.timestamp_ms)
                } else {
                    SessionError::OutOfOrder {
                        timestamp_ms: d.timestamp_ms,
                        last_ms: last,
                    }
                });
            }
            if !seen.insert(d.finding_id.as_str()) {
                return Err(SessionError::Duplicate(d.finding_id.clone()));
            }
            last = d.timestamp_ms;
        }
        Ok(())
    }
}
