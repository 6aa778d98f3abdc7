//! Site queries drafted from findings, their lifecycle, and review sessions.
//!
//! Lifecycle:
//!
//! ```text
//! draft --approve--> approved --send--> sent --answer--> answered --close--> closed
//!   |                                    ^                   |
//!   +--reject--> rejected                +-------send--------+
//! ```
//!
//! `edit` is allowed only in draft and keeps the state. Every accepted
//! transition appends exactly one audit entry.

mod session;
mod template;

pub use session::{Condition, Decision, ReviewSession, SessionError, Verdict};
pub use template::TemplateSet;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::Category;
use crate::data::{AuditAction, AuditEntry, AuditError, AuditLog};
use crate::detector::Finding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryState {
    Draft,
    Approved,
    Sent,
    Answered,
    Closed,
    Rejected,
}

impl QueryState {
    pub const ALL: [QueryState; 6] = [
        QueryState::Draft,
        QueryState::Approved,
        QueryState::Sent,
        QueryState::Answered,
        QueryState::Closed,
        QueryState::Rejected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryState::Draft => "draft",
            QueryState::Approved => "approved",
            QueryState::Sent => "sent",
            QueryState::Answered => "answered",
            QueryState::Closed => "closed",
            QueryState::Rejected => "rejected",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, QueryState::Closed | QueryState::Rejected)
    }
}

impl fmt::Display for QueryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum QueryAction {
    Edit { text: String },
    Approve,
    Reject,
    Send,
    Answer { response: String },
    Close,
}

impl QueryAction {
    pub fn name(&self) -> &'static str {
        match self {
            QueryAction::Edit { .. } => "edit",
            QueryAction::Approve => "approve",
            QueryAction::Reject => "reject",
            QueryAction::Send => "send",
            QueryAction::Answer { .. } => "answer",
            QueryAction::Close => "close",
        }
    }

    fn audit_action(&self) -> AuditAction {
        match self {
            QueryAction::Edit { .. } => AuditAction::QueryEdited,
            QueryAction::Approve => AuditAction::QueryApproved,
            QueryAction::Reject => AuditAction::QueryRejected,
            QueryAction::Send => AuditAction::QuerySent,
            QueryAction::Answer { .. } => AuditAction::QueryAnswered,
            QueryAction::Close => AuditAction::QueryClosed,
        }
    }
}

/// The transition table. `None` means the action is illegal in `state`.
pub fn next_state(state: QueryState, action: &QueryAction) -> Option<QueryState> {
    use QueryState::*;
    match (state, action) {
        (Draft, QueryAction::Edit { .. }) => Some(Draft),
        (Draft, QueryAction::Approve) => Some(Approved),
        (Draft, QueryAction::Reject) => Some(Rejected),
        (Approved, QueryAction::Send) => Some(Sent),
        (Sent, QueryAction::Answer { .. }) => Some(Answered),
        (Answered, QueryAction::Close) => Some(Closed),
        (Answered, QueryAction::Send) => Some(Sent),
        _ => None,
    }
}

fn next_from_audit(state: QueryState, action: AuditAction) -> Option<QueryState> {
    let probe = match action {
        AuditAction::QueryEdited => QueryAction::Edit { text: String::new() },
        AuditAction::QueryApproved => QueryAction::Approve,
        AuditAction::QueryRejected => QueryAction::Reject,
        AuditAction::QuerySent => QueryAction::Send,
        AuditAction::QueryAnswered => QueryAction::Answer { response: String::new() },
        AuditAction::QueryClosed => QueryAction::Close,
        _ => return None,
    };
    next_state(state, &probe)
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("cannot {action} a query in state {state}")]
    IllegalTransition { state: QueryState, action: &'static str },
    #[error("query text must not be empty")]
    EmptyText,
    #[error("template error: {0}")]
    Template(String),
    #[error("replay error: {0}")]
    Replay(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEdit {
    pub timestamp_ms: i64,
    pub actor: String,
    pub previous_text: String,
    pub new_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQuery {
    pub query_id: String,
    pub finding_id: String,
    pub patient_id: String,
    pub category: Option<Category>,
    pub record_ids: Vec<String>,
    pub site_text: String,
    pub state: QueryState,
    pub edits: Vec<QueryEdit>,
    #[serde(default)]
    pub responses: Vec<String>,
    pub created_ms: i64,
    pub updated_ms: i64,
}

pub fn query_id_for(finding_id: &str) -> String {
    format!("Q-{finding_id}")
}

/// Drafts a query for `finding` from its category template.
pub fn suggest_query(finding: &Finding, templates: &TemplateSet, now_ms: i64) -> Result<ReviewQuery, QueryError> {
    Ok(ReviewQuery {
        query_id: query_id_for(&finding.finding_id),
        finding_id: finding.finding_id.clone(),
        patient_id: finding.patient_id.clone(),
        category: finding.category,
        record_ids: finding.record_ids.clone(),
        site_text: templates.render(finding)?,
        state: QueryState::Draft,
        edits: Vec::new(),
        responses: Vec::new(),
        created_ms: now_ms,
        updated_ms: now_ms,
    })
}

/// Audit entry recording that a query was drafted.
pub fn creation_entry(query: &ReviewQuery, actor: &str) -> AuditEntry {
    AuditEntry::new(
        query.created_ms,
        actor,
        AuditAction::QueryCreated,
        &query.query_id,
        query.site_text.as_bytes(),
    )
}

/// Applies `action`, appending its audit entry to `log`. On any error the
/// query and the log are unchanged.
pub fn transition(
    query: &mut ReviewQuery,
    action: QueryAction,
    actor: &str,
    now_ms: i64,
    log: &mut AuditLog,
) -> Result<AuditEntry, QueryError> {
    let next = next_state(query.state, &action).ok_or(QueryError::IllegalTransition {
        state: query.state,
        action: action.name(),
    })?;
    if let QueryAction::Edit { text } = &action {
        if text.trim().is_empty() {
            return Err(QueryError::EmptyText);
        }
    }
    let payload = serde_json::to_vec(&action).expect("actions serialize");
    let entry = AuditEntry::new(now_ms, actor, action.audit_action(), &query.query_id, &payload);
    let entry = log.append(entry)?.clone();
    match action {
        QueryAction::Edit { text } => {
            let previous_text = std::mem::replace(&mut query.site_text, text.clone());
            query.edits.push(QueryEdit {
                timestamp_ms: now_ms,
                actor: actor.to_string(),
                previous_text,
                new_text: text,
            });
        }
        QueryAction::Answer { response } => query.responses.push(response),
        _ => {}
    }
    query.state = next;
    query.updated_ms = now_ms;
    Ok(entry)
}

/// Reconstructs a query's state from its audit entries, which must start
/// with the creation entry.
pub fn replay<'a>(entries: impl IntoIterator<Item = &'a AuditEntry>) -> Result<QueryState, QueryError> {
    let mut entries = entries.into_iter();
    match entries.next() {
        Some(e) if e.action == AuditAction::QueryCreated => {}
        Some(e) => return Err(QueryError::Replay(format!("first entry is {:?}, not creation", e.action))),
        None => return Err(QueryError::Replay("no entries".into())),
    }
    let mut state = QueryState::Draft;
    for e in entries {
        state = next_from_audit(state, e.action)
            .ok_or_else(|| QueryError::Replay(format!("{:?} is not legal from {state}", e.action)))?;
    }
    Ok(state)
}
