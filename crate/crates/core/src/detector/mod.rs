//! Discrepancy detection.
//!
//! Six deterministic checks, one per discrepancy category, run over each
//! patient's records. Findings can then be adjudicated by an external
//! assistant, which may adjust confidence and rationale but never the
//! evidence or drop a finding. Output is priority-ordered.

mod assistant;

pub use assistant::{
    adjudicate_all, Assistant, AssistantContext, AssistantError, AssistantRequest, AssistantResponse,
    AssistantVerdict, StubAssistant,
};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::category::Category;
use crate::context::{significance_score, ScoringConfig};
use crate::data::{
    ActionTaken, AdverseEvent, Causality, DoseEventKind, PatientRecords, StudyDataset,
};
use crate::knowledge::{Indication, KnowledgeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Minor,
    Major,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingSource {
    #[serde(rename = "rule")]
    Rule,
    #[serde(rename = "assistant")]
    Assistant,
    #[serde(rename = "rule+assistant")]
    RuleAssistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub finding_id: String,
    pub patient_id: String,
    /// Evidence; the first id is the primary record.
    pub record_ids: Vec<String>,
    /// `None` marks an unverifiable finding outside the six categories.
    pub category: Option<Category>,
    pub severity: Severity,
    pub confidence: f64,
    pub rationale: String,
    pub source: FindingSource,
    pub significance: f64,
    /// Values quoted by query templates.
    pub facts: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<AssistantVerdict>,
}

impl Finding {
    pub fn primary_record(&self) -> &str {
        &self.record_ids[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub conmed_tolerance_days: i32,
    pub severity_lab_window_days: i32,
    pub dose_window_days: i32,
    pub support_window_days: i32,
    pub causality_window_days: i32,
    /// Concurrent assistant requests.
    pub max_in_flight: usize,
    pub scoring: ScoringConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            conmed_tolerance_days: 3,
            severity_lab_window_days: 7,
            dose_window_days: 7,
            support_window_days: 14,
            causality_window_days: 14,
            max_in_flight: 4,
            scoring: ScoringConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub findings: Vec<Finding>,
    /// Set when an assistant was configured but at least one call failed.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assistant_errors: Vec<String>,
}

impl DetectionReport {
    pub fn category_findings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.category.is_some())
    }

    pub fn to_ndjson(&self) -> String {
        findings_to_ndjson(&self.findings)
    }
}

pub fn findings_to_ndjson(findings: &[Finding]) -> String {
    let mut out = String::new();
    for f in findings {
        out.push_str(&serde_json::to_string(f).expect("findings serialize"));
        out.push('\n');
    }
    out
}

pub fn findings_from_ndjson(text: &str) -> Result<Vec<Finding>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

struct Ctx<'a> {
    kb: &'a KnowledgeBase,
    cfg: &'a DetectorConfig,
    last_day: i32,
}

fn draft(
    category: Option<Category>,
    p: &PatientRecords<'_>,
    record_ids: Vec<String>,
    severity: Severity,
    confidence: f64,
    rationale: String,
    facts: Value,
) -> Finding {
    let tag = category.map_or("U".to_string(), |c| c.number().to_string());
    let facts = match facts {
        Value::Object(map) => map.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    Finding {
        finding_id: format!("F{tag}-{}", record_ids[0]),
        patient_id: p.patient.patient_id.clone(),
        record_ids,
        category,
        severity,
        confidence,
        rationale,
        source: FindingSource::Rule,
        significance: 0.0,
        facts,
        assistant: None,
    }
}

fn ae_window_end(ae: &AdverseEvent, last_day: i32) -> i32 {
    ae.end_day.unwrap_or(last_day)
}

/// Category 1: conmed not indicated for the AE it treats.
pub fn check_conmed_indication(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    per_patient(ds, kb, cfg, conmed_indication)
}

fn conmed_indication(p: &PatientRecords<'_>, ctx: &Ctx<'_>) -> Vec<Finding> {
    let mut out = Vec::new();
    for cm in &p.conmeds {
        let linked = cm.linked_ae_id.as_deref().and_then(|id| p.adverse_event(id));
        let term = match linked {
            Some(ae) => Some(ctx.kb.canonical(&ae.term)),
            None => ctx.kb.normalize_term(&cm.indication_text),
        };
        let mut ids = vec![cm.cm_id.clone()];
        ids.extend(linked.map(|ae| ae.ae_id.clone()));
        let Some(term) = term else {
            if ctx.kb.drug(&cm.drug_name).is_none() {
                out.push(unverifiable(p, ids, &cm.drug_name, None));
            }
            continue;
        };
        match ctx.kb.indicated_for(&cm.drug_name, &term) {
            Indication::Indicated => {}
            Indication::UnknownDrug => out.push(unverifiable(p, ids, &cm.drug_name, Some(&term))),
            Indication::NotIndicated => {
                let drug = ctx.kb.drug(&cm.drug_name).expect("known drug");
                let indications: Vec<&str> = drug.indications.iter().map(String::as_str).collect();
                out.push(draft(
                    Some(Category::InappropriateConmed),
                    p,
                    ids,
                    Severity::Major,
                    0.9,
                    format!(
                        "{} is recorded as treatment for {term}, but its labeled indications are: {}.",
                        cm.drug_name,
                        if indications.is_empty() { "none".to_string() } else { indications.join(", ") }
                    ),
                    json!({
                        "cm_id": cm.cm_id,
                        "drug": cm.drug_name,
                        "ae_id": linked.map(|a| a.ae_id.clone()),
                        "ae_term": term,
                        "indications": indications.join(", "),
                    }),
                ));
            }
        }
    }
    out
}

fn unverifiable(p: &PatientRecords<'_>, ids: Vec<String>, drug: &str, term: Option<&str>) -> Finding {
    draft(
        None,
        p,
        ids,
        Severity::Minor,
        0.5,
        format!(
            "{drug} is not in the knowledge base; its use{} cannot be verified.",
            term.map(|t| format!(" for {t}")).unwrap_or_default()
        ),
        json!({ "drug": drug, "ae_term": term }),
    )
}

/// Category 2: conmed starts well before its AE or well after it ends.
pub fn check_conmed_timing(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    per_patient(ds, kb, cfg, conmed_timing)
}

fn conmed_timing(p: &PatientRecords<'_>, ctx: &Ctx<'_>) -> Vec<Finding> {
    let tol = ctx.cfg.conmed_tolerance_days;
    let mut out = Vec::new();
    for cm in &p.conmeds {
        let Some(ae) = cm.linked_ae_id.as_deref().and_then(|id| p.adverse_event(id)) else {
            continue;
        };
        let end = ae_window_end(ae, ctx.last_day);
        let (gap, relation) = if cm.start_day < ae.start_day - tol {
            (ae.start_day - cm.start_day, "before the event started")
        } else if cm.start_day > end + tol {
            (cm.start_day - end, "after the event ended")
        } else {
            continue;
        };
        out.push(draft(
            Some(Category::ConmedTiming),
            p,
            vec![cm.cm_id.clone(), ae.ae_id.clone()],
            Severity::Minor,
            0.9,
            format!(
                "{} started on day {}, {gap} days {relation} ({} days {}-{}).",
                cm.drug_name,
                cm.start_day,
                ae.term,
                ae.start_day,
                ae.end_day.map_or("ongoing".to_string(), |d| d.to_string())
            ),
            json!({
                "cm_id": cm.cm_id,
                "drug": cm.drug_name,
                "ae_id": ae.ae_id,
                "ae_term": ae.term,
                "cm_start": cm.start_day,
                "ae_start": ae.start_day,
                "ae_end": ae.end_day.map_or("ongoing".to_string(), |d| d.to_string()),
                "gap_days": gap,
                "relation": relation,
            }),
        ));
    }
    out
}

/// Category 3: coded grade contradicts narrative cues or the graded lab.
pub fn check_severity(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    per_patient(ds, kb, cfg, severity)
}

fn severity(p: &PatientRecords<'_>, ctx: &Ctx<'_>) -> Vec<Finding> {
    let window = ctx.cfg.severity_lab_window_days;
    let mut out = Vec::new();
    for ae in &p.adverse_events {
        let mut ids = vec![ae.ae_id.clone()];
        let (expected, basis) = match ctx.kb.narrative_min_grade(&ae.narrative) {
            Some((cue, keyword)) if cue > ae.grade => (cue, format!("the narrative says '{keyword}'")),
            _ => {
                let Some(rule) = ctx.kb.grading_rule(&ae.term) else { continue };
                let nearest = p
                    .labs
                    .iter()
                    .filter(|l| l.analyte == rule.analyte && rule.grade(l.value).is_some())
                    .filter(|l| (l.collection_day - ae.start_day).abs() <= window)
                    .min_by_key(|l| ((l.collection_day - ae.start_day).abs(), l.collection_day, l.lab_id.clone()));
                let Some(lab) = nearest else { continue };
                let lab_grade = rule.grade(lab.value).expect("filtered to graded labs");
                if lab_grade == ae.grade {
                    continue;
                }
                ids.push(lab.lab_id.clone());
                (
                    lab_grade,
                    format!(
                        "{} {} {} on day {} corresponds to grade {lab_grade}",
                        lab.analyte, lab.value, lab.units, lab.collection_day
                    ),
                )
            }
        };
        out.push(draft(
            Some(Category::Severity),
            p,
            ids,
            if expected.max(ae.grade) >= 3 { Severity::Critical } else { Severity::Major },
            0.9,
            format!("{} is coded grade {}, but {basis}.", ae.term, ae.grade),
            json!({
                "ae_id": ae.ae_id,
                "ae_term": ae.term,
                "coded_grade": ae.grade,
                "expected_grade": expected,
                "basis": basis,
            }),
        ));
    }
    out
}

/// Category 4: documented dose action and exposure records disagree.
pub fn check_dose_action(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    per_patient(ds, kb, cfg, dose_action)
}

fn expected_event(action: ActionTaken) -> Option<DoseEventKind> {
    match action {
        ActionTaken::None => None,
        ActionTaken::DoseReduced => Some(DoseEventKind::Reduction),
        ActionTaken::DoseInterrupted => Some(DoseEventKind::Interruption),
        ActionTaken::DrugWithdrawn => Some(DoseEventKind::Stop),
    }
}

fn dose_action(p: &PatientRecords<'_>, ctx: &Ctx<'_>) -> Vec<Finding> {
    let window = ctx.cfg.dose_window_days;
    let events = p.dose_events();
    let mut out = Vec::new();
    for ae in &p.adverse_events {
        let Some(kind) = expected_event(ae.action_taken) else { continue };
        let span = ae.start_day..=ae.start_day + window;
        if events.iter().any(|e| e.kind == kind && span.contains(&e.day)) {
            continue;
        }
        let mut ids = vec![ae.ae_id.clone()];
        ids.extend(
            p.exposures
                .iter()
                .filter(|x| x.start_day <= *span.end() && x.end_day >= *span.start())
                .map(|x| x.ex_id.clone()),
        );
        let doses: Vec<String> = p
            .exposures
            .iter()
            .filter(|x| ids.contains(&x.ex_id))
            .map(|x| format!("{} mg days {}-{}", x.dose_mg, x.start_day, x.end_day))
            .collect();
        let exposure = if doses.is_empty() { "no dosing".to_string() } else { doses.join("; ") };
        out.push(draft(
            Some(Category::DoseChange),
            p,
            ids,
            Severity::Major,
            0.85,
            format!(
                "{} (day {}) has action '{}', but exposure shows {exposure} within {window} days.",
                ae.term,
                ae.start_day,
                ae.action_taken.as_str()
            ),
            json!({
                "ae_id": ae.ae_id,
                "ae_term": ae.term,
                "action": ae.action_taken.as_str(),
                "ae_start": ae.start_day,
                "exposure": exposure,
                "direction": "action_without_dose_change",
            }),
        ));
    }
    for e in &events {
        let action = match e.kind {
            DoseEventKind::Reduction => ActionTaken::DoseReduced,
            DoseEventKind::Interruption => ActionTaken::DoseInterrupted,
            _ => continue,
        };
        let span = e.day - window..=e.day;
        let explained = p
            .adverse_events
            .iter()
            .any(|ae| ae.action_taken == action && span.contains(&ae.start_day));
        if explained {
            continue;
        }
        let nearby: Vec<&AdverseEvent> = p
            .adverse_events
            .iter()
            .copied()
            .filter(|ae| span.contains(&ae.start_day) || (ae.start_day <= e.day && ae_window_end(ae, ctx.last_day) >= e.day))
            .collect();
        let mut ids = vec![e.ex_id.clone()];
        ids.extend(nearby.iter().map(|ae| ae.ae_id.clone()));
        let change = match e.kind {
            DoseEventKind::Reduction => format!("reduced from {} to {} mg", e.from_mg, e.to_mg),
            _ => format!("interrupted after {} mg", e.from_mg),
        };
        let terms: Vec<String> = nearby
            .iter()
            .map(|ae| format!("{} ({})", ae.term, ae.action_taken.as_str()))
            .collect();
        out.push(draft(
            Some(Category::DoseChange),
            p,
            ids,
            Severity::Major,
            0.85,
            format!(
                "Study drug {change} on day {}, but no adverse event documents this action{}.",
                e.day,
                if terms.is_empty() { String::new() } else { format!("; nearby events: {}", terms.join(", ")) }
            ),
            json!({
                "ex_id": e.ex_id,
                "change_day": e.day,
                "change": change,
                "nearby_events": terms.join(", "),
                "direction": "dose_change_without_action",
            }),
        ));
    }
    out
}

/// Category 5: causality contradicts timing or known toxicity.
pub fn check_causality(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    per_patient(ds, kb, cfg, causality)
}

fn causality(p: &PatientRecords<'_>, ctx: &Ctx<'_>) -> Vec<Finding> {
    let window = ctx.cfg.causality_window_days;
    let first_dose = p.first_exposure_day();
    let mut out = Vec::new();
    for ae in &p.adverse_events {
        let (reason, evidence) = match ae.causality {
            Causality::Related => match first_dose {
                Some(first) if ae.start_day < first => (
                    format!("is assessed as related but began on day {}, before the first dose on day {first}", ae.start_day),
                    p.exposures.iter().filter(|x| x.start_day == first).map(|x| x.ex_id.clone()).collect::<Vec<_>>(),
                ),
                _ => continue,
            },
            Causality::NotRelated if ctx.kb.is_study_drug_toxicity(&ae.term) => {
                let recent = p
                    .exposures
                    .iter()
                    .filter(|x| (0..=window).contains(&(ae.start_day - x.start_day)))
                    .max_by_key(|x| x.start_day);
                match recent {
                    Some(x) => (
                        format!(
                            "is a known study-drug toxicity starting {} days after dosing (day {}) but is assessed as not related",
                            ae.start_day - x.start_day,
                            x.start_day
                        ),
                        vec![x.ex_id.clone()],
                    ),
                    None => continue,
                }
            }
            _ => continue,
        };
        let mut ids = vec![ae.ae_id.clone()];
        ids.extend(evidence);
        out.push(draft(
            Some(Category::Causality),
            p,
            ids,
            if ae.serious { Severity::Critical } else { Severity::Major },
            0.9,
            format!("{} {reason}.", ae.term),
            json!({
                "ae_id": ae.ae_id,
                "ae_term": ae.term,
                "causality": ae.causality.as_str(),
                "ae_start": ae.start_day,
                "first_dose": first_dose,
                "reason": reason,
            }),
        ));
    }
    out
}

/// Category 6: lab-gradeable AE with no abnormal lab near onset.
pub fn check_supporting_data(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    per_patient(ds, kb, cfg, supporting_data)
}

fn supporting_data(p: &PatientRecords<'_>, ctx: &Ctx<'_>) -> Vec<Finding> {
    let window = ctx.cfg.support_window_days;
    let mut out = Vec::new();
    for ae in &p.adverse_events {
        let Some(rule) = ctx.kb.grading_rule(&ae.term) else { continue };
        let supported = p.labs.iter().any(|l| {
            l.analyte == rule.analyte
                && rule.grade(l.value).is_some()
                && (l.collection_day - ae.start_day).abs() <= window
        });
        if supported {
            continue;
        }
        let nearby: Vec<String> = p
            .labs
            .iter()
            .filter(|l| l.analyte == rule.analyte && (l.collection_day - ae.start_day).abs() <= window)
            .map(|l| l.lab_id.clone())
            .collect();
        let mut ids = vec![ae.ae_id.clone()];
        ids.extend(nearby.iter().cloned());
        out.push(draft(
            Some(Category::NoSupportingData),
            p,
            ids,
            Severity::Major,
            0.85,
            format!(
                "{} (grade {}, day {}) has no abnormal {} result within {window} days of onset{}.",
                ae.term,
                ae.grade,
                ae.start_day,
                rule.analyte,
                if nearby.is_empty() { String::new() } else { format!("; {} normal result(s) found", nearby.len()) }
            ),
            json!({
                "ae_id": ae.ae_id,
                "ae_term": ae.term,
                "analyte": rule.analyte.as_str(),
                "window_days": window,
                "ae_start": ae.start_day,
            }),
        ));
    }
    out
}

type Check = fn(&PatientRecords<'_>, &Ctx<'_>) -> Vec<Finding>;

const CHECKS: [Check; 6] = [
    conmed_indication,
    conmed_timing,
    severity,
    dose_action,
    causality,
    supporting_data,
];

fn per_patient(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig, check: Check) -> Vec<Finding> {
    let ctx = Ctx {
        kb,
        cfg,
        last_day: ds.last_observed_day(),
    };
    let mut out = Vec::new();
    for p in ds.by_patient() {
        let mut found = check(&p, &ctx);
        for f in &mut found {
            f.significance = significance(f, &p, kb, cfg);
        }
        out.extend(found);
    }
    out
}

/// Highest clinical weight among the evidence records: lab significance
/// scores, and 20 points per AE grade (plus 20 when serious).
fn significance(f: &Finding, p: &PatientRecords<'_>, kb: &KnowledgeBase, cfg: &DetectorConfig) -> f64 {
    let mut best: f64 = 0.0;
    for id in &f.record_ids {
        if let Some(ae) = p.adverse_event(id) {
            best = best.max(20.0 * ae.grade as f64 + if ae.serious { 20.0 } else { 0.0 });
        } else if let Some(lab) = p.labs.iter().find(|l| &l.lab_id == id) {
            best = best.max(significance_score(lab, p, kb, &cfg.scoring).score);
        }
    }
    best.min(100.0)
}

/// Rule-only detection over all six checks, deduplicated and sorted.
pub fn detect_rules(ds: &StudyDataset, kb: &KnowledgeBase, cfg: &DetectorConfig) -> Vec<Finding> {
    let mut all = Vec::new();
    for check in CHECKS {
        all.extend(per_patient(ds, kb, cfg, check));
    }
    all = dedupe(all);
    sort_by_priority(&mut all);
    all
}

/// Collapses findings sharing (category, primary record). Evidence and
/// rationale of later duplicates are folded into the first.
fn dedupe(all: Vec<Finding>) -> Vec<Finding> {
    let mut index: HashMap<(Option<Category>, String), usize> = HashMap::new();
    let mut out: Vec<Finding> = Vec::with_capacity(all.len());
    for f in all {
        match index.get(&(f.category, f.primary_record().to_string())) {
            Some(&i) => {
                let kept = &mut out[i];
                for id in f.record_ids {
                    if !kept.record_ids.contains(&id) {
                        kept.record_ids.push(id);
                    }
                }
                if !kept.rationale.contains(&f.rationale) {
                    kept.rationale = format!("{} {}", kept.rationale, f.rationale);
                }
                kept.severity = kept.severity.max(f.severity);
                kept.significance = kept.significance.max(f.significance);
            }
            None => {
                index.insert((f.category, f.primary_record().to_string()), out.len());
                out.push(f);
            }
        }
    }
    out
}

/// Full pipeline: rules, then optional assistant adjudication.
pub fn detect_all(
    ds: &StudyDataset,
    kb: &KnowledgeBase,
    cfg: &DetectorConfig,
    assistant: Option<&dyn Assistant>,
) -> DetectionReport {
    let mut findings = detect_rules(ds, kb, cfg);
    let Some(assistant) = assistant else {
        return DetectionReport {
            findings,
            degraded: false,
            assistant: None,
            assistant_errors: Vec::new(),
        };
    };
    let errors = adjudicate_all(&mut findings, ds, kb, assistant, cfg.max_in_flight);
    sort_by_priority(&mut findings);
    DetectionReport {
        findings,
        degraded: !errors.is_empty(),
        assistant: Some(assistant.name().to_string()),
        assistant_errors: errors,
    }
}

/// Severity desc, significance desc, patient id, finding id.
pub fn priority_order(a: &Finding, b: &Finding) -> Ordering {
    b.severity
        .cmp(&a.severity)
        .then_with(|| b.significance.total_cmp(&a.significance))
        .then_with(|| a.patient_id.cmp(&b.patient_id))
        .then_with(|| a.finding_id.cmp(&b.finding_id))
}

pub fn sort_by_priority(findings: &mut [Finding]) {
    findings.sort_by(priority_order);
}
