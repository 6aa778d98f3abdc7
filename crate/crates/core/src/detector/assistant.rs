//! Assistant adjudication of rule findings.
//!
//! The assistant sees a finding plus the evidence records, a slice of the
//! patient timeline, and the reference facts the rule used. Its verdict
//! is attached to the finding; it can move confidence and extend the
//! rationale, never the evidence or the category. Calls that fail leave
//! the finding exactly as the rules produced it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{Finding, FindingSource};
use crate::category::Category;
use crate::context::{timeline_of, TimelineEvent};
use crate::data::{PatientRecords, StudyDataset};
use crate::knowledge::KnowledgeBase;

/// Days either side of the primary record included in the timeline slice.
const TIMELINE_SLICE_DAYS: i32 = 14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssistantError {
    #[error("assistant unavailable: {0}")]
    Unavailable(String),
    #[error("assistant timed out")]
    Timeout,
    #[error("malformed assistant response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantContext {
    pub records: Vec<Value>,
    pub timeline: Vec<TimelineEvent>,
    pub kb_facts: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantRequest {
    pub finding: Finding,
    pub context: AssistantContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantResponse {
    pub agree: bool,
    #[serde(default)]
    pub category: Option<Category>,
    pub confidence: f64,
    pub rationale: String,
}

impl AssistantResponse {
    pub fn validate(&self) -> Result<(), AssistantError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(AssistantError::Malformed(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if self.rationale.trim().is_empty() {
            return Err(AssistantError::Malformed("empty rationale".into()));
        }
        Ok(())
    }
}

/// What the assistant said, kept on the finding for the reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantVerdict {
    pub assistant: String,
    pub agree: bool,
    #[serde(default)]
    pub suggested_category: Option<Category>,
    pub confidence: f64,
    pub rationale: String,
}

pub trait Assistant: Send + Sync {
    fn name(&self) -> &str;
    fn adjudicate(&self, request: &AssistantRequest) -> Result<AssistantResponse, AssistantError>;
}

/// Deterministic offline assistant: agrees with every categorised finding
/// and defers on unverifiable ones.
#[derive(Debug, Default, Clone)]
pub struct StubAssistant;

impl Assistant for StubAssistant {
    fn name(&self) -> &str {
        "stub"
    }

    fn adjudicate(&self, request: &AssistantRequest) -> Result<AssistantResponse, AssistantError> {
        let f = &request.finding;
        Ok(match f.category {
            Some(c) => AssistantResponse {
                agree: true,
                category: Some(c),
                confidence: ((f.confidence + 0.05).min(0.99) * 100.0).round() / 100.0,
                rationale: format!(
                    "Records {} are consistent with a {} discrepancy.",
                    f.record_ids.join(", "),
                    c.label()
                ),
            },
            None => AssistantResponse {
                agree: false,
                category: None,
                confidence: 0.4,
                rationale: "Drug is outside the reference list; manual review needed.".into(),
            },
        })
    }
}

fn record_json(p: &PatientRecords<'_>, id: &str) -> Option<Value> {
    p.record_value(id).map(|(_, v)| v)
}

fn kb_facts(f: &Finding, kb: &KnowledgeBase) -> BTreeMap<String, Value> {
    let mut facts = BTreeMap::new();
    if let Some(Value::String(drug)) = f.facts.get("drug") {
        facts.insert("drug".into(), serde_json::to_value(kb.drug(drug)).expect("serialize"));
    }
    if let Some(Value::String(term)) = f.facts.get("ae_term") {
        facts.insert("grading_rule".into(), serde_json::to_value(kb.grading_rule(term)).expect("serialize"));
        facts.insert("study_drug_toxicity".into(), json!(kb.is_study_drug_toxicity(term)));
    }
    facts
}

pub fn build_request(f: &Finding, p: &PatientRecords<'_>, kb: &KnowledgeBase) -> AssistantRequest {
    let timeline = timeline_of(p);
    let anchor = timeline
        .iter()
        .find(|e| e.record_id == f.primary_record())
        .map(|e| e.day);
    let timeline = match anchor {
        Some(day) => timeline
            .into_iter()
            .filter(|e| (e.day - day).abs() <= TIMELINE_SLICE_DAYS)
            .collect(),
        None => timeline,
    };
    AssistantRequest {
        finding: f.clone(),
        context: AssistantContext {
            records: f.record_ids.iter().filter_map(|id| record_json(p, id)).collect(),
            timeline,
            kb_facts: kb_facts(f, kb),
        },
    }
}

fn apply(f: &mut Finding, assistant: &str, r: AssistantResponse) {
    f.confidence = r.confidence;
    if r.agree {
        f.source = FindingSource::RuleAssistant;
    }
    f.rationale = format!("{} Assistant: {}", f.rationale, r.rationale);
    f.assistant = Some(AssistantVerdict {
        assistant: assistant.to_string(),
        agree: r.agree,
        suggested_category: r.category,
        confidence: r.confidence,
        rationale: r.rationale,
    });
}

/// Adjudicates every finding with at most `max_in_flight` concurrent calls.
/// Returns one message per failed call; failed findings are left untouched.
pub fn adjudicate_all(
    findings: &mut [Finding],
    ds: &StudyDataset,
    kb: &KnowledgeBase,
    assistant: &dyn Assistant,
    max_in_flight: usize,
) -> Vec<String> {
    let requests: Vec<Option<AssistantRequest>> = findings
        .iter()
        .map(|f| ds.patient_records(&f.patient_id).map(|p| build_request(f, &p, kb)))
        .collect();
    let results: Mutex<Vec<Option<Result<AssistantResponse, AssistantError>>>> =
        Mutex::new(vec![None; findings.len()]);
    let next = AtomicUsize::new(0);
    let workers = max_in_flight.max(1).min(findings.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let outcome = match req {
                    Some(req) => assistant.adjudicate(req).and_then(|r| r.validate().map(|_| r)),
                    None => Err(AssistantError::Malformed("finding references unknown patient".into())),
                };
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });
    let mut errors = Vec::new();
    for (f, outcome) in findings.iter_mut().zip(results.into_inner().expect("results lock")) {
        match outcome.expect("every finding visited") {
            Ok(r) => apply(f, assistant.name(), r),
            Err(e) => {
                tracing::warn!(finding = %f.finding_id, error = %e, "assistant call failed");
                errors.push(format!("{}: {e}", f.finding_id));
            }
        }
    }
    errors
}
