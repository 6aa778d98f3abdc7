//! Patient timelines and the clinical context computed over them.
//!
//! A timeline is the day-ordered event stream for one patient. On top of it
//! sit temporal associations (what started shortly before what), the
//! weight/edema/BNP heart-failure pattern, and a 0-100 significance score
//! for lab results that accounts for pre-study history and expected
//! treatment effects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Analyte, LabResult, PatientRecords, StudyDataset};
use crate::knowledge::{normalize_text, Direction, KnowledgeBase, ProgressionTrigger};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("patient {0} not found")]
    UnknownPatient(String),
    #[error("record {0} not found")]
    UnknownRecord(String),
}

/// Event kinds in tie-break order for events on the same day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AeStart,
    AeEnd,
    MedStart,
    MedEnd,
    DoseChange,
    Lab,
    Vital,
    Procedure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabFlag {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub day: i32,
    pub kind: EventKind,
    pub record_id: String,
    /// AE term, drug name, analyte, vital or procedure name.
    pub label: String,
    /// Salient value: grade, dose mg, lab value or weight kg.
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<LabFlag>,
}

pub const STUDY_DRUG_LABEL: &str = "study drug";

pub fn build_timeline(ds: &StudyDataset, patient_id: &str) -> Result<Vec<TimelineEvent>, ContextError> {
    let records = ds
        .patient_records(patient_id)
        .ok_or_else(|| ContextError::UnknownPatient(patient_id.to_string()))?;
    Ok(timeline_of(&records))
}

pub fn timeline_of(p: &PatientRecords<'_>) -> Vec<TimelineEvent> {
    let mut events = Vec::new();
    let mut push = |day, kind, id: &str, label: &str, value, flag| {
        events.push(TimelineEvent {
            day,
            kind,
            record_id: id.to_string(),
            label: label.to_string(),
            value,
            flag,
        })
    };
    for ae in &p.adverse_events {
        push(ae.start_day, EventKind::AeStart, &ae.ae_id, &ae.term, Some(ae.grade as f64), None);
        if let Some(end) = ae.end_day {
            push(end, EventKind::AeEnd, &ae.ae_id, &ae.term, None, None);
        }
    }
    for cm in &p.conmeds {
        push(cm.start_day, EventKind::MedStart, &cm.cm_id, &cm.drug_name, None, None);
        if let Some(end) = cm.end_day {
            push(end, EventKind::MedEnd, &cm.cm_id, &cm.drug_name, None, None);
        }
    }
    for ex in &p.exposures {
        push(ex.start_day, EventKind::DoseChange, &ex.ex_id, STUDY_DRUG_LABEL, Some(ex.dose_mg), None);
    }
    for lab in &p.labs {
        let flag = if lab.is_low() {
            Some(LabFlag::Low)
        } else if lab.is_high() {
            Some(LabFlag::High)
        } else {
            None
        };
        push(lab.collection_day, EventKind::Lab, &lab.lab_id, lab.analyte.as_str(), Some(lab.value), flag);
    }
    for vs in &p.vitals {
        push(vs.day, EventKind::Vital, &vs.vs_id, "weight", Some(vs.weight_kg), None);
    }
    for pr in &p.procedures {
        push(pr.day, EventKind::Procedure, &pr.pr_id, &pr.name, None, None);
    }
    events.sort_by(|a, b| (a.day, a.kind, &a.record_id).cmp(&(b.day, b.kind, &b.record_id)));
    events
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalAssociation {
    pub source: String,
    pub target: String,
    /// Target day minus source day; never negative.
    pub lag_days: i32,
    pub rule_id: String,
}

pub const RULE_HEPATOTOXIC: &str = "hepatotoxic_med_then_liver_enzyme_rise";
pub const RULE_ONSET: &str = "treatment_start_then_ae_onset";

/// Day window for an hour window on a day-granular timeline.
pub fn window_days(window_hours: u32) -> i32 {
    window_hours.div_ceil(24) as i32
}

/// Source-before-target pairs within the window: hepatotoxic conmed starts
/// followed by raised ALT/AST, and any treatment start followed by AE onset.
pub fn find_temporal_associations(
    timeline: &[TimelineEvent],
    kb: &KnowledgeBase,
    window_hours: u32,
) -> Vec<TemporalAssociation> {
    let window = window_days(window_hours);
    let mut out = Vec::new();
    for src in timeline {
        let is_med = src.kind == EventKind::MedStart;
        let is_start = is_med || src.kind == EventKind::DoseChange;
        if !is_start {
            continue;
        }
        let hepatotoxic = is_med && kb.is_hepatotoxic(&src.label);
        for tgt in timeline {
            let lag = tgt.day - src.day;
            if !(0..=window).contains(&lag) || tgt.record_id == src.record_id {
                continue;
            }
            let liver = tgt.kind == EventKind::Lab
                && matches!(tgt.label.as_str(), "alt" | "ast")
                && tgt.flag == Some(LabFlag::High);
            let rule = if hepatotoxic && liver {
                RULE_HEPATOTOXIC
            } else if tgt.kind == EventKind::AeStart {
                RULE_ONSET
            } else {
                continue;
            };
            out.push(TemporalAssociation {
                source: src.record_id.clone(),
                target: tgt.record_id.clone(),
                lag_days: lag,
                rule_id: rule.to_string(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternFlag {
    pub pattern: String,
    pub first_day: i32,
    pub last_day: i32,
    /// Weight vital, edema AE and BNP lab, in that order.
    pub evidence: Vec<String>,
}

pub const HEART_FAILURE_SPAN_DAYS: i32 = 14;
pub const WEIGHT_GAIN_KG: f64 = 2.0;

fn is_edema(term: &str) -> bool {
    let t = normalize_text(term);
    t.split(' ').any(|w| w == "edema" || w == "oedema")
}

/// Weight gain over baseline, active edema and raised BNP inside one
/// 14-day span. Baseline is the earliest weight on the timeline.
pub fn detect_pattern_heart_failure(timeline: &[TimelineEvent]) -> Option<PatternFlag> {
    let weights: Vec<&TimelineEvent> = timeline.iter().filter(|e| e.kind == EventKind::Vital).collect();
    let baseline = weights.first()?.value?;
    let gains: Vec<&TimelineEvent> = weights
        .iter()
        .copied()
        .filter(|e| e.value.is_some_and(|w| w >= baseline + WEIGHT_GAIN_KG))
        .collect();
    let bnps: Vec<&TimelineEvent> = timeline
        .iter()
        .filter(|e| e.kind == EventKind::Lab && e.label == Analyte::Bnp.as_str() && e.flag == Some(LabFlag::High))
        .collect();
    let last_day = timeline.last()?.day;
    let edemas: Vec<(i32, i32, &str)> = timeline
        .iter()
        .filter(|e| e.kind == EventKind::AeStart && is_edema(&e.label))
        .map(|start| {
            let end = timeline
                .iter()
                .find(|e| e.kind == EventKind::AeEnd && e.record_id == start.record_id)
                .map_or(last_day, |e| e.day);
            (start.day, end, start.record_id.as_str())
        })
        .collect();

    let span = HEART_FAILURE_SPAN_DAYS - 1;
    for w in &gains {
        for b in &bnps {
            let (lo, hi) = (w.day.min(b.day), w.day.max(b.day));
            if hi - lo > span {
                continue;
            }
            for &(start, end, ae_id) in &edemas {
                let a_lo = start.max(hi - span);
                let a_hi = end.min(lo + span);
                if a_lo <= a_hi {
                    return Some(PatternFlag {
                        pattern: "heart_failure".into(),
                        first_day: lo.min(a_lo),
                        last_day: hi.max(a_lo),
                        evidence: vec![w.record_id.clone(), ae_id.to_string(), b.record_id.clone()],
                    });
                }
            }
        }
    }
    None
}

/// Weights for the lab significance score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Ceiling of the magnitude component.
    pub magnitude_weight: f64,
    /// Relative excursion (fraction of the normal-range width) at which the
    /// magnitude component reaches 63% of its ceiling.
    pub magnitude_scale: f64,
    pub proximity_weight: f64,
    /// Days after a normal result beyond which proximity contributes 0.
    pub proximity_days: f64,
    pub history_discount: f64,
    pub progression_suppression: f64,
    pub flag_threshold: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            magnitude_weight: 60.0,
            magnitude_scale: 0.3,
            proximity_weight: 25.0,
            proximity_days: 28.0,
            history_discount: 25.0,
            progression_suppression: 40.0,
            flag_threshold: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceScore {
    pub record_id: String,
    pub score: f64,
    pub rationale: Vec<String>,
}

impl SignificanceScore {
    pub fn flagged(&self, cfg: &ScoringConfig) -> bool {
        self.score >= cfg.flag_threshold
    }
}

/// Significance of a lab result in its patient's context.
pub fn significance_score(
    lab: &LabResult,
    p: &PatientRecords<'_>,
    kb: &KnowledgeBase,
    cfg: &ScoringConfig,
) -> SignificanceScore {
    let mut rationale = Vec::new();
    if !lab.is_abnormal() {
        rationale.push("within_normal".to_string());
        return SignificanceScore {
            record_id: lab.lab_id.clone(),
            score: 0.0,
            rationale,
        };
    }
    let width = lab.normal_high - lab.normal_low;
    let relative = lab.excursion() / width;
    let magnitude = cfg.magnitude_weight * (1.0 - (-relative / cfg.magnitude_scale).exp());
    rationale.push(format!("magnitude:{relative:.3}"));

    let prior_normal = p
        .labs
        .iter()
        .filter(|l| l.analyte == lab.analyte && l.collection_day < lab.collection_day && !l.is_abnormal())
        .map(|l| l.collection_day)
        .max();
    let proximity = match prior_normal {
        Some(day) => {
            let gap = (lab.collection_day - day) as f64;
            rationale.push(format!("days_since_normal:{gap}"));
            cfg.proximity_weight * (1.0 - gap / cfg.proximity_days).max(0.0)
        }
        None => {
            rationale.push("no_prior_normal".to_string());
            cfg.proximity_weight / 2.0
        }
    };

    let direction = if lab.is_low() { Direction::Below } else { Direction::Above };
    let mut score = magnitude + proximity;

    if let Some(term) = kb.term_for_change(lab.analyte, direction) {
        let known = p
            .medical_history
            .iter()
            .any(|mh| mh.pre_study && kb.canonical(&mh.condition) == term);
        if known {
            score -= cfg.history_discount;
            rationale.push(format!("history:{term}"));
        }
    }

    if let Some(trigger) = expected_by(lab, direction, p, kb) {
        score -= cfg.progression_suppression;
        rationale.push(format!("expected_progression:{trigger}"));
    }

    SignificanceScore {
        record_id: lab.lab_id.clone(),
        score: score.clamp(0.0, 100.0),
        rationale,
    }
}

/// Record id of the treatment start that makes this change expected.
fn expected_by(lab: &LabResult, direction: Direction, p: &PatientRecords<'_>, kb: &KnowledgeBase) -> Option<String> {
    for prog in kb.expected_progressions() {
        if prog.analyte != lab.analyte || prog.direction != direction {
            continue;
        }
        let within = |start: i32| (0..=prog.window_days).contains(&(lab.collection_day - start));
        match &prog.trigger {
            ProgressionTrigger::StudyDrug => {
                if let Some(ex) = p.exposures.iter().find(|e| within(e.start_day)) {
                    return Some(ex.ex_id.clone());
                }
            }
            ProgressionTrigger::MedicationClass { class } => {
                let hit = p.conmeds.iter().find(|cm| {
                    within(cm.start_day)
                        && kb.drug(&cm.drug_name).and_then(|d| d.drug_class.as_deref()) == Some(class.as_str())
                });
                if let Some(cm) = hit {
                    return Some(cm.cm_id.clone());
                }
            }
        }
    }
    None
}

/// Everything the context engine knows about one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientContext {
    pub patient_id: String,
    pub timeline: Vec<TimelineEvent>,
    pub associations: Vec<TemporalAssociation>,
    pub patterns: Vec<PatternFlag>,
    pub lab_scores: BTreeMap<String, SignificanceScore>,
}

pub const DEFAULT_WINDOW_HOURS: u32 = 72;

pub fn patient_context(p: &PatientRecords<'_>, kb: &KnowledgeBase, cfg: &ScoringConfig) -> PatientContext {
    let timeline = timeline_of(p);
    let associations = find_temporal_associations(&timeline, kb, DEFAULT_WINDOW_HOURS);
    let patterns = detect_pattern_heart_failure(&timeline).into_iter().collect();
    let lab_scores = p
        .labs
        .iter()
        .map(|lab| (lab.lab_id.clone(), significance_score(lab, p, kb, cfg)))
        .collect();
    PatientContext {
        patient_id: p.patient.patient_id.clone(),
        timeline,
        associations,
        patterns,
        lab_scores,
    }
}

/// NDJSON dump of a patient's timeline, associations, patterns and scores.
pub fn dump_ndjson(ds: &StudyDataset, kb: &KnowledgeBase, patient_id: &str) -> Result<String, ContextError> {
    let p = ds
        .patient_records(patient_id)
        .ok_or_else(|| ContextError::UnknownPatient(patient_id.to_string()))?;
    let ctx = patient_context(&p, kb, &ScoringConfig::default());
    let mut out = String::new();
    let mut line = |kind: &str, value: serde_json::Value| {
        let mut obj = serde_json::Map::new();
        obj.insert("type".into(), kind.into());
        if let serde_json::Value::Object(fields) = value {
            obj.extend(fields);
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    };
    for e in &ctx.timeline {
        line("event", serde_json::to_value(e).expect("serializable"));
    }
    for a in &ctx.associations {
        line("association", serde_json::to_value(a).expect("serializable"));
    }
    for f in &ctx.patterns {
        line("pattern", serde_json::to_value(f).expect("serializable"));
    }
    for s in ctx.lab_scores.values() {
        line("score", serde_json::to_value(s).expect("serializable"));
    }
    Ok(out)
}
