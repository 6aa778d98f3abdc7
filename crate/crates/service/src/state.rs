//! Service state: datasets with their findings, queries, sessions and the
//! audit log, plus the NDJSON stores that persist them.
//!
//! Reads take short locks and clone out what they need. Writes to a query or
//! a session hold that resource's own lock for the whole mutation; the audit
//! log has a single writer behind its mutex.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use crfcheck_core::context::{patient_context, PatientContext, ScoringConfig, TimelineEvent};
use crfcheck_core::data::{import_dataset, AuditAction, AuditEntry, AuditLog, Domain, StudyDataset};
use crfcheck_core::detector::{detect_all, sort_by_priority, Assistant, DetectionReport, DetectorConfig, Finding, Severity};
use crfcheck_core::econ::{total_report, EconParams, EconReport};
use crfcheck_core::evalstats::{evaluate_detection, finding_truth, score_sessions, DetectionEval, SessionReport, SessionScore};
use crfcheck_core::knowledge::{GradingRule, KnowledgeBase};
use crfcheck_core::query::{
    creation_entry, suggest_query, transition, Condition, QueryAction, QueryState, ReviewQuery, ReviewSession,
    TemplateSet, Verdict,
};
use crfcheck_core::synthgen::TruthFile;
use crfcheck_core::Category;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assistant::HttpAssistant;
use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::store::NdjsonStore;

pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as i64)
    })
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("knowledge base: {0}")]
    Kb(String),
    #[error("templates: {0}")]
    Templates(String),
    #[error("economic parameters: {0}")]
    Econ(String),
    #[error("store: {0}")]
    Store(String),
    #[error("dataset {dataset_id}: {message}")]
    Dataset { dataset_id: String, message: String },
}

/// A dataset registration as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset_id: String,
    pub source_dir: PathBuf,
    #[serde(default)]
    pub truth_path: Option<PathBuf>,
    pub imported_ms: i64,
    pub imported_by: String,
}

pub struct LoadedDataset {
    pub record: DatasetRecord,
    pub data: StudyDataset,
    /// Findings in priority order.
    pub report: DetectionReport,
    pub truth: Option<TruthFile>,
    index: HashMap<String, usize>,
}

impl LoadedDataset {
    pub fn finding(&self, finding_id: &str) -> Option<&Finding> {
        self.index.get(finding_id).map(|&i| &self.report.findings[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    #[serde(flatten)]
    pub record: DatasetRecord,
    pub active: bool,
    pub patients: usize,
    pub records: usize,
    pub findings: usize,
    pub category_findings: usize,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assistant: Option<String>,
    pub has_truth: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ImportRequest {
    pub reviewer_id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub truth_path: Option<PathBuf>,
}

/// A finding as listed in the worklist.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingView {
    #[serde(flatten)]
    pub finding: Finding,
    pub query_state: Option<QueryState>,
    /// Latest reviewer verdict across sessions.
    pub decision: Option<Verdict>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct FindingFilter {
    pub dataset: Option<String>,
    pub sort: Option<String>,
    pub patient: Option<String>,
    pub category: Option<u8>,
    pub severity: Option<Severity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingList {
    pub dataset_id: String,
    pub findings: Vec<FindingView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceRecord {
    pub record_id: String,
    pub domain: Option<Domain>,
    pub record: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingDetail {
    pub dataset_id: String,
    #[serde(flatten)]
    pub view: FindingView,
    pub evidence: Vec<EvidenceRecord>,
    pub timeline: Vec<TimelineEvent>,
    pub query: Option<ReviewQuery>,
    /// Draft text the query would get if created now.
    pub suggested_query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientProfile {
    pub dataset_id: String,
    pub patient_id: String,
    pub records: Value,
    pub context: PatientContext,
    pub finding_ids: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateQueryRequest {
    pub reviewer_id: String,
    pub finding_id: String,
    #[serde(default)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TransitionRequest {
    pub reviewer_id: String,
    #[serde(flatten)]
    pub action: QueryAction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryDetail {
    #[serde(flatten)]
    pub query: ReviewQuery,
    pub history: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSession {
    pub dataset_id: String,
    #[serde(flatten)]
    pub session: ReviewSession,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSessionRequest {
    pub reviewer_id: String,
    pub condition: Condition,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DecisionRequest {
    pub reviewer_id: String,
    pub finding_id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReviewerRequest {
    pub reviewer_id: String,
}

/// Live counters for a session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub stored: StoredSession,
    pub decision_count: usize,
    pub elapsed_minutes: f64,
    /// Present when the dataset has ground truth.
    pub score: Option<SessionScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub detection: Option<DetectionEval>,
    pub sessions: Option<SessionReport>,
    pub notes: Vec<String>,
}

struct Datasets {
    by_id: BTreeMap<String, Arc<LoadedDataset>>,
    active: Option<String>,
}

type Shared<T> = Arc<tokio::sync::Mutex<T>>;

pub struct AppState {
    pub config: ServiceConfig,
    kb: KnowledgeBase,
    templates: TemplateSet,
    detector: DetectorConfig,
    assistant: Option<Arc<dyn Assistant>>,
    econ: EconParams,
    clock: Clock,
    last_ms: AtomicI64,
    datasets: RwLock<Datasets>,
    queries: Mutex<BTreeMap<String, Shared<ReviewQuery>>>,
    sessions: Mutex<BTreeMap<String, Shared<StoredSession>>>,
    query_states: Mutex<HashMap<String, QueryState>>,
    decisions: Mutex<HashMap<String, (i64, Verdict)>>,
    audit: Mutex<AuditLog>,
    dataset_store: NdjsonStore<DatasetRecord>,
    query_store: NdjsonStore<ReviewQuery>,
    session_store: NdjsonStore<StoredSession>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn require_reviewer(reviewer_id: &str) -> Result<(), ApiError> {
    if reviewer_id.trim().is_empty() {
        return Err(ApiError::bad_request("reviewer_id is required"));
    }
    Ok(())
}

impl AppState {
    /// Loads reference data and restores every store under the data directory.
    pub fn open(config: ServiceConfig) -> Result<Self, StartupError> {
        Self::open_with(config, system_clock(), None)
    }

    /// As [`AppState::open`], with an injected clock and optionally an
    /// assistant that overrides the configured endpoint.
    pub fn open_with(
        config: ServiceConfig,
        clock: Clock,
        assistant: Option<Arc<dyn Assistant>>,
    ) -> Result<Self, StartupError> {
        config.validate()?;
        let kb = match &config.kb_path {
            Some(p) => KnowledgeBase::load(p).map_err(|e| StartupError::Kb(e.to_string()))?,
            None => KnowledgeBase::builtin(),
        };
        let templates = match &config.template_dir {
            Some(p) => TemplateSet::load(p).map_err(|e| StartupError::Templates(e.to_string()))?,
            None => TemplateSet::builtin(),
        };
        let econ = match &config.econ_params {
            Some(p) => EconParams::load(p).map_err(|e| StartupError::Econ(e.to_string()))?,
            None => EconParams::default(),
        };
        econ.validate().map_err(|e| StartupError::Econ(e.to_string()))?;
        let assistant = assistant.or_else(|| {
            config
                .assistant
                .as_ref()
                .map(|a| Arc::new(HttpAssistant::new(a)) as Arc<dyn Assistant>)
        });
        let dir = &config.data_dir;
        let audit = AuditLog::open(&dir.join("audit.ndjson")).map_err(|e| StartupError::Store(e.to_string()))?;
        let state = AppState {
            kb,
            templates,
            detector: DetectorConfig::default(),
            assistant,
            econ,
            clock,
            last_ms: AtomicI64::new(i64::MIN),
            datasets: RwLock::new(Datasets {
                by_id: BTreeMap::new(),
                active: None,
            }),
            queries: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
            query_states: Mutex::new(HashMap::new()),
            decisions: Mutex::new(HashMap::new()),
            audit: Mutex::new(audit),
            dataset_store: NdjsonStore::new(dir.join("datasets.ndjson")),
            query_store: NdjsonStore::new(dir.join("queries.ndjson")),
            session_store: NdjsonStore::new(dir.join("sessions.ndjson")),
            config,
        };
        state.restore()?;
        Ok(state)
    }

    fn restore(&self) -> Result<(), StartupError> {
        let records = self
            .dataset_store
            .load(|r| r.dataset_id.clone())
            .map_err(StartupError::Store)?;
        let mut latest: Option<(i64, String)> = None;
        for (id, record) in records {
            let loaded = self.load_dataset(record).map_err(|message| StartupError::Dataset {
                dataset_id: id.clone(),
                message,
            })?;
            if latest.as_ref().is_none_or(|(t, _)| loaded.record.imported_ms >= *t) {
                latest = Some((loaded.record.imported_ms, id.clone()));
            }
            self.write_datasets().by_id.insert(id, Arc::new(loaded));
        }
        self.write_datasets().active = latest.map(|(_, id)| id);

        for (id, q) in self.query_store.load(|q| q.query_id.clone()).map_err(StartupError::Store)? {
            lock(&self.query_states).insert(q.finding_id.clone(), q.state);
            lock(&self.queries).insert(id, Arc::new(tokio::sync::Mutex::new(q)));
        }
        for (id, s) in self
            .session_store
            .load(|s| s.session.session_id.clone())
            .map_err(StartupError::Store)?
        {
            s.session.validate().map_err(|e| StartupError::Store(format!("session {id}: {e}")))?;
            for d in &s.session.decisions {
                self.note_decision(&d.finding_id, d.timestamp_ms, d.verdict);
            }
            lock(&self.sessions).insert(id, Arc::new(tokio::sync::Mutex::new(s)));
        }
        Ok(())
    }

    fn write_datasets(&self) -> std::sync::RwLockWriteGuard<'_, Datasets> {
        self.datasets.write().unwrap_or_else(|p| p.into_inner())
    }

    fn read_datasets(&self) -> std::sync::RwLockReadGuard<'_, Datasets> {
        self.datasets.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Milliseconds now, never earlier than a previously issued time.
    pub fn now(&self) -> i64 {
        let t = (self.clock)();
        let prev = self.last_ms.fetch_max(t, Ordering::SeqCst);
        prev.max(t)
    }

    fn audit(&self, entry: AuditEntry) -> Result<AuditEntry, ApiError> {
        lock(&self.audit)
            .append(entry)
            .cloned()
            .map_err(|e| ApiError::internal(e.to_string()))
    }

    pub fn audit_entries(&self, subject: Option<&str>) -> Vec<AuditEntry> {
        let log = lock(&self.audit);
        log.entries()
            .iter()
            .filter(|e| subject.is_none_or(|s| e.subject_id == s))
            .cloned()
            .collect()
    }

    pub fn grading_rules(&self) -> Vec<GradingRule> {
        self.kb.grading_rules().cloned().collect()
    }

    // ---- datasets

    /// Imports, detects and indexes one dataset. Blocking.
    fn load_dataset(&self, record: DatasetRecord) -> Result<LoadedDataset, String> {
        let data = import_dataset(&record.source_dir).map_err(|e| e.to_string())?;
        let truth = match &record.truth_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Some(serde_json::from_str::<TruthFile>(&text).map_err(|e| format!("{}: {e}", p.display()))?)
            }
            None => None,
        };
        let mut report = detect_all(&data, &self.kb, &self.detector, self.assistant.as_deref());
        sort_by_priority(&mut report.findings);
        let index = report
            .findings
            .iter()
            .enumerate()
            .map(|(i, f)| (f.finding_id.clone(), i))
            .collect();
        Ok(LoadedDataset {
            record,
            data,
            report,
            truth,
            index,
        })
    }

    fn summary(&self, d: &LoadedDataset, active: bool) -> DatasetSummary {
        DatasetSummary {
            record: d.record.clone(),
            active,
            patients: d.data.patients.len(),
            records: d.data.record_count(),
            findings: d.report.findings.len(),
            category_findings: d.report.category_findings().count(),
            degraded: d.report.degraded,
            assistant: d.report.assistant.clone(),
            has_truth: d.truth.is_some(),
        }
    }

    pub fn list_datasets(&self) -> Vec<DatasetSummary> {
        let ds = self.read_datasets();
        ds.by_id
            .values()
            .map(|d| self.summary(d, ds.active.as_deref() == Some(d.record.dataset_id.as_str())))
            .collect()
    }

    /// Blocking: runs import and detection on the calling thread.
    pub fn import(&self, req: ImportRequest) -> Result<DatasetSummary, ApiError> {
        require_reviewer(&req.reviewer_id)?;
        let dataset_id = match req.dataset_id {
            Some(id) if !id.trim().is_empty() => id,
            Some(_) => return Err(ApiError::bad_request("dataset_id must not be empty")),
            None => req
                .path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| ApiError::bad_request("path has no final component to name the dataset"))?,
        };
        let record = DatasetRecord {
            dataset_id: dataset_id.clone(),
            source_dir: req.path,
            truth_path: req.truth_path,
            imported_ms: self.now(),
            imported_by: req.reviewer_id.clone(),
        };
        let loaded = self.load_dataset(record.clone()).map_err(ApiError::bad_request)?;
        let payload = serde_json::to_vec(&serde_json::json!({
            "source_dir": record.source_dir,
            "truth_path": record.truth_path,
            "findings": loaded.report.findings.len(),
        }))
        .expect("payload serializes");
        self.audit(AuditEntry::new(
            record.imported_ms,
            &req.reviewer_id,
            AuditAction::DatasetImported,
            &dataset_id,
            &payload,
        ))?;
        self.dataset_store.append(&record).map_err(ApiError::internal)?;
        let summary = self.summary(&loaded, true);
        let mut ds = self.write_datasets();
        ds.by_id.insert(dataset_id.clone(), Arc::new(loaded));
        ds.active = Some(dataset_id);
        Ok(summary)
    }

    pub fn dataset(&self, id: Option<&str>) -> Result<Arc<LoadedDataset>, ApiError> {
        let ds = self.read_datasets();
        let id = match id {
            Some(id) => id,
            None => ds
                .active
                .as_deref()
                .ok_or_else(|| ApiError::not_found("dataset", "(none imported)"))?,
        };
        ds.by_id
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("dataset", id))
    }

    fn note_decision(&self, finding_id: &str, at: i64, verdict: Verdict) {
        let mut d = lock(&self.decisions);
        let slot = d.entry(finding_id.to_string()).or_insert((at, verdict));
        if at >= slot.0 {
            *slot = (at, verdict);
        }
    }

    fn view(&self, f: &Finding) -> FindingView {
        FindingView {
            finding: f.clone(),
            query_state: lock(&self.query_states).get(&f.finding_id).copied(),
            decision: lock(&self.decisions).get(&f.finding_id).map(|(_, v)| *v),
        }
    }

    // ---- findings

    pub fn findings(&self, filter: &FindingFilter) -> Result<FindingList, ApiError> {
        let d = self.dataset(filter.dataset.as_deref())?;
        let category = match filter.category {
            Some(n) => Some(Category::from_number(n).ok_or_else(|| ApiError::bad_request(format!("no category {n}")))?),
            None => None,
        };
        let mut findings: Vec<Finding> = d
            .report
            .findings
            .iter()
            .filter(|f| filter.patient.as_ref().is_none_or(|p| &f.patient_id == p))
            .filter(|f| category.is_none_or(|c| f.category == Some(c)))
            .filter(|f| filter.severity.is_none_or(|s| f.severity == s))
            .cloned()
            .collect();
        match filter.sort.as_deref() {
            None | Some("priority") => sort_by_priority(&mut findings),
            Some("patient") => {
                sort_by_priority(&mut findings);
                findings.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
            }
            Some(other) => return Err(ApiError::bad_request(format!("unknown sort {other}; use priority or patient"))),
        }
        Ok(FindingList {
            dataset_id: d.record.dataset_id.clone(),
            findings: findings.iter().map(|f| self.view(f)).collect(),
        })
    }

    pub async fn finding_detail(&self, id: &str, dataset: Option<&str>) -> Result<FindingDetail, ApiError> {
        let d = self.dataset(dataset)?;
        let f = d.finding(id).ok_or_else(|| ApiError::not_found("finding", id))?;
        let p = d
            .data
            .patient_records(&f.patient_id)
            .ok_or_else(|| ApiError::internal(format!("patient {} missing", f.patient_id)))?;
        let evidence = f
            .record_ids
            .iter()
            .map(|rid| match p.record_value(rid) {
                Some((domain, record)) => EvidenceRecord {
                    record_id: rid.clone(),
                    domain: Some(domain),
                    record,
                },
                // deleted supporting records are cited but no longer exist
                None => EvidenceRecord {
                    record_id: rid.clone(),
                    domain: None,
                    record: Value::Null,
                },
            })
            .collect();
        let timeline = crfcheck_core::context::timeline_of(&p);
        let query = match self.query_handle(&crfcheck_core::query::query_id_for(id)) {
            Some(q) => Some(q.lock().await.clone()),
            None => None,
        };
        Ok(FindingDetail {
            dataset_id: d.record.dataset_id.clone(),
            view: self.view(f),
            evidence,
            timeline,
            suggested_query: self.templates.render(f).ok(),
            query,
        })
    }

    pub fn profile(&self, patient_id: &str, dataset: Option<&str>) -> Result<PatientProfile, ApiError> {
        let d = self.dataset(dataset)?;
        let p = d
            .data
            .patient_records(patient_id)
            .ok_or_else(|| ApiError::not_found("patient", patient_id))?;
        Ok(PatientProfile {
            dataset_id: d.record.dataset_id.clone(),
            patient_id: patient_id.to_string(),
            records: serde_json::to_value(&p).expect("records serialize"),
            context: patient_context(&p, &self.kb, &ScoringConfig::default()),
            finding_ids: d
                .report
                .findings
                .iter()
                .filter(|f| f.patient_id == patient_id)
                .map(|f| f.finding_id.clone())
                .collect(),
        })
    }

    // ---- queries

    fn query_handle(&self, id: &str) -> Option<Shared<ReviewQuery>> {
        lock(&self.queries).get(id).cloned()
    }

    pub fn create_query(&self, req: CreateQueryRequest) -> Result<ReviewQuery, ApiError> {
        require_reviewer(&req.reviewer_id)?;
        let d = self.dataset(req.dataset_id.as_deref())?;
        let f = d
            .finding(&req.finding_id)
            .ok_or_else(|| ApiError::not_found("finding", &req.finding_id))?;
        let mut queries = lock(&self.queries);
        let query = suggest_query(f, &self.templates, self.now())?;
        if queries.contains_key(&query.query_id) {
            return Err(ApiError::conflict(format!("query {} already exists", query.query_id)));
        }
        self.audit(creation_entry(&query, &req.reviewer_id))?;
        self.query_store.append(&query).map_err(ApiError::internal)?;
        lock(&self.query_states).insert(query.finding_id.clone(), query.state);
        queries.insert(query.query_id.clone(), Arc::new(tokio::sync::Mutex::new(query.clone())));
        Ok(query)
    }

    pub async fn transition_query(&self, id: &str, req: TransitionRequest) -> Result<ReviewQuery, ApiError> {
        require_reviewer(&req.reviewer_id)?;
        let handle = self.query_handle(id).ok_or_else(|| ApiError::not_found("query", id))?;
        let mut q = handle.lock().await;
        let mut next = q.clone();
        {
            let mut log = lock(&self.audit);
            transition(&mut next, req.action, &req.reviewer_id, self.now(), &mut log)?;
        }
        self.query_store.append(&next).map_err(ApiError::internal)?;
        lock(&self.query_states).insert(next.finding_id.clone(), next.state);
        *q = next.clone();
        Ok(next)
    }

    pub async fn list_queries(&self) -> Vec<ReviewQuery> {
        let handles: Vec<_> = lock(&self.queries).values().cloned().collect();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            out.push(h.lock().await.clone());
        }
        out
    }

    pub async fn query_detail(&self, id: &str) -> Result<QueryDetail, ApiError> {
        let handle = self.query_handle(id).ok_or_else(|| ApiError::not_found("query", id))?;
        let query = handle.lock().await.clone();
        Ok(QueryDetail {
            history: self.audit_entries(Some(id)),
            query,
        })
    }

    // ---- sessions

    fn session_handle(&self, id: &str) -> Option<Shared<StoredSession>> {
        lock(&self.sessions).get(id).cloned()
    }

    pub fn create_session(&self, req: CreateSessionRequest) -> Result<SessionView, ApiError> {
        require_reviewer(&req.reviewer_id)?;
        let d = self.dataset(req.dataset_id.as_deref())?;
        let mut sessions = lock(&self.sessions);
        let id = match req.session_id {
            Some(id) if !id.trim().is_empty() => id,
            Some(_) => return Err(ApiError::bad_request("session_id must not be empty")),
            None => format!("S-{:04}", sessions.len() + 1),
        };
        if sessions.contains_key(&id) {
            return Err(ApiError::conflict(format!("session {id} already exists")));
        }
        let stored = StoredSession {
            dataset_id: d.record.dataset_id.clone(),
            session: ReviewSession::new(&id, &req.reviewer_id, req.condition, self.now()),
        };
        let payload = serde_json::to_vec(&stored).expect("session serializes");
        self.audit(AuditEntry::new(
            stored.session.started_ms,
            &req.reviewer_id,
            AuditAction::SessionStarted,
            &id,
            &payload,
        ))?;
        self.session_store.append(&stored).map_err(ApiError::internal)?;
        sessions.insert(id, Arc::new(tokio::sync::Mutex::new(stored.clone())));
        drop(sessions);
        Ok(self.session_view(stored))
    }

    pub async fn record_decision(&self, id: &str, req: DecisionRequest) -> Result<SessionView, ApiError> {
        require_reviewer(&req.reviewer_id)?;
        let handle = self.session_handle(id).ok_or_else(|| ApiError::not_found("session", id))?;
        let mut s = handle.lock().await;
        if s.session.reviewer_id != req.reviewer_id {
            return Err(ApiError::forbidden(format!(
                "session {id} belongs to reviewer {}",
                s.session.reviewer_id
            )));
        }
        let d = self.dataset(Some(&s.dataset_id))?;
        if d.finding(&req.finding_id).is_none() {
            return Err(ApiError::not_found("finding", &req.finding_id));
        }
        let mut next = s.clone();
        let now = self.now();
        let decision = next
            .session
            .record_decision(&req.finding_id, req.verdict, now)
            .map_err(|e| ApiError::conflict(e.to_string()))?
            .clone();
        let payload = serde_json::to_vec(&decision).expect("decision serializes");
        self.audit(AuditEntry::new(now, &req.reviewer_id, AuditAction::DecisionRecorded, id, &payload))?;
        self.session_store.append(&next).map_err(ApiError::internal)?;
        self.note_decision(&req.finding_id, now, req.verdict);
        *s = next.clone();
        drop(s);
        Ok(self.session_view(next))
    }

    pub async fn end_session(&self, id: &str, req: ReviewerRequest) -> Result<SessionView, ApiError> {
        require_reviewer(&req.reviewer_id)?;
        let handle = self.session_handle(id).ok_or_else(|| ApiError::not_found("session", id))?;
        let mut s = handle.lock().await;
        if s.session.reviewer_id != req.reviewer_id {
            return Err(ApiError::forbidden(format!(
                "session {id} belongs to reviewer {}",
                s.session.reviewer_id
            )));
        }
        let mut next = s.clone();
        let now = self.now();
        next.session.end(now).map_err(|e| ApiError::conflict(e.to_string()))?;
        self.audit(AuditEntry::new(now, &req.reviewer_id, AuditAction::SessionEnded, id, b""))?;
        self.session_store.append(&next).map_err(ApiError::internal)?;
        *s = next.clone();
        drop(s);
        Ok(self.session_view(next))
    }

    fn session_view(&self, stored: StoredSession) -> SessionView {
        let score = self.dataset(Some(&stored.dataset_id)).ok().and_then(|d| {
            let truth = d.truth.as_ref()?;
            let map = finding_truth(&d.report.findings, truth);
            crfcheck_core::evalstats::score_session(&stored.session, &map).ok()
        });
        SessionView {
            decision_count: stored.session.decisions.len(),
            elapsed_minutes: stored.session.duration_minutes(),
            score,
            stored,
        }
    }

    pub async fn session(&self, id: &str) -> Result<SessionView, ApiError> {
        let handle = self.session_handle(id).ok_or_else(|| ApiError::not_found("session", id))?;
        let stored = handle.lock().await.clone();
        Ok(self.session_view(stored))
    }

    async fn all_sessions(&self) -> Vec<StoredSession> {
        let handles: Vec<_> = lock(&self.sessions).values().cloned().collect();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            out.push(h.lock().await.clone());
        }
        out
    }

    pub async fn list_sessions(&self) -> Vec<SessionView> {
        self.all_sessions()
            .await
            .into_iter()
            .map(|s| self.session_view(s))
            .collect()
    }

    // ---- reports

    pub async fn eval_report(&self, dataset: Option<&str>) -> Result<EvalReport, ApiError> {
        let d = self.dataset(dataset)?;
        let mut notes = Vec::new();
        let Some(truth) = &d.truth else {
            notes.push("dataset has no ground truth; nothing to score".to_string());
            return Ok(EvalReport {
                dataset_id: d.record.dataset_id.clone(),
                detection: None,
                sessions: None,
                notes,
            });
        };
        let detection = evaluate_detection(&d.report.findings, truth)
            .map_err(|e| notes.push(format!("detection: {e}")))
            .ok();
        let map = finding_truth(&d.report.findings, truth);
        let sessions: Vec<ReviewSession> = self
            .all_sessions()
            .await
            .into_iter()
            .filter(|s| s.dataset_id == d.record.dataset_id)
            .map(|s| s.session)
            .collect();
        let sessions = if sessions.is_empty() {
            notes.push("no review sessions recorded".to_string());
            None
        } else {
            score_sessions(&sessions, &map)
                .map_err(|e| notes.push(format!("sessions: {e}")))
                .ok()
        };
        Ok(EvalReport {
            dataset_id: d.record.dataset_id.clone(),
            detection,
            sessions,
            notes,
        })
    }

    /// The cost model with the configured parameters, overridden field by field.
    pub fn econ_report(&self, overrides: &BTreeMap<String, String>) -> Result<EconReport, ApiError> {
        let mut p = self.econ.clone();
        for (field, value) in overrides {
            let v = Decimal::from_str(value)
                .or_else(|_| Decimal::from_scientific(value))
                .map_err(|_| ApiError::bad_request(format!("{field}={value} is not a number")))?;
            *p.field_mut(field).map_err(|e| ApiError::bad_request(e.to_string()))? = v;
        }
        total_report(&p).map_err(|e| ApiError::bad_request(e.to_string()))
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }
}
