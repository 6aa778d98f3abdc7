use std::fmt;

use serde::{Deserialize, Serialize};

use super::windows;
use crate::data::{ActionTaken, AdverseEvent, Causality, DoseEventKind, LabResult, StudyDataset};
use crate::knowledge::{GradingRule, Indication, KnowledgeBase};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceIssue {
    pub record_id: String,
    pub message: String,
}

impl fmt::Display for CoherenceIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record_id, self.message)
    }
}

pub(crate) fn ae_window_end(ae: &AdverseEvent, last_day: i32) -> i32 {
    ae.end_day.unwrap_or(last_day)
}

/// Labs of the rule's analyte, abnormal in the rule's direction, within
/// `window` days of `day`.
pub(crate) fn graded_labs_near<'a>(
    labs: &[&'a LabResult],
    rule: &GradingRule,
    day: i32,
    window: i32,
) -> Vec<&'a LabResult> {
    labs.iter()
        .copied()
        .filter(|l| l.analyte == rule.analyte && rule.grade(l.value).is_some())
        .filter(|l| (l.collection_day - day).abs() <= window)
        .collect()
}

pub(crate) fn action_matches(kind: DoseEventKind, action: ActionTaken) -> bool {
    matches!(
        (kind, action),
        (DoseEventKind::Reduction, ActionTaken::DoseReduced)
            | (DoseEventKind::Interruption, ActionTaken::DoseInterrupted)
            | (DoseEventKind::Stop, ActionTaken::DrugWithdrawn)
    )
}

/// Generator-side consistency audit: every issue returned here is a record
/// set that a reviewer would query. Clean generated corpora return none.
pub fn check_coherence(ds: &StudyDataset, kb: &KnowledgeBase) -> Vec<CoherenceIssue> {
    let mut issues = Vec::new();
    let mut issue = |id: &str, message: String| {
        issues.push(CoherenceIssue {
            record_id: id.to_string(),
            message,
        })
    };
    let last_day = ds.last_observed_day();

    for p in ds.by_patient() {
        for cm in &p.conmeds {
            match &cm.linked_ae_id {
                Some(ae_id) => {
                    let Some(ae) = p.adverse_event(ae_id) else { continue };
                    if kb.indicated_for(&cm.drug_name, &ae.term) == Indication::NotIndicated {
                        issue(&cm.cm_id, format!("{} not indicated for {}", cm.drug_name, ae.term));
                    }
                    let lo = ae.start_day - windows::CONMED_TIMING;
                    let hi = ae_window_end(ae, last_day) + windows::CONMED_TIMING;
                    if cm.start_day < lo || cm.start_day > hi {
                        issue(&cm.cm_id, format!("starts day {} outside [{lo}, {hi}]", cm.start_day));
                    }
                }
                None => {
                    if let Some(term) = kb.normalize_term(&cm.indication_text) {
                        if kb.indicated_for(&cm.drug_name, &term) == Indication::NotIndicated {
                            issue(&cm.cm_id, format!("{} not indicated for {term}", cm.drug_name));
                        }
                    }
                }
            }
        }

        let events = p.dose_events();
        let first_dose = p.first_exposure_day();
        for ae in &p.adverse_events {
            if let Some((cue, keyword)) = kb.narrative_min_grade(&ae.narrative) {
                if cue > ae.grade {
                    issue(&ae.ae_id, format!("narrative '{keyword}' implies grade {cue}, coded {}", ae.grade));
                }
            }
            if let Some(rule) = kb.grading_rule(&ae.term) {
                for lab in graded_labs_near(&p.labs, rule, ae.start_day, windows::SEVERITY_LAB) {
                    let g = rule.grade(lab.value).unwrap_or(0);
                    if g != ae.grade {
                        issue(&ae.ae_id, format!("lab {} grades {g}, coded {}", lab.lab_id, ae.grade));
                    }
                }
                if graded_labs_near(&p.labs, rule, ae.start_day, windows::SUPPORTING_LAB).is_empty() {
                    issue(&ae.ae_id, "no supporting abnormal lab".into());
                }
            }
            if ae.action_taken != ActionTaken::None {
                let seen = events.iter().any(|e| {
                    action_matches(e.kind, ae.action_taken)
                        && (ae.start_day..=ae.start_day + windows::DOSE_ACTION).contains(&e.day)
                });
                if !seen {
                    issue(&ae.ae_id, format!("{} not reflected in exposure", ae.action_taken.as_str()));
                }
            }
            match ae.causality {
                Causality::Related if first_dose.is_some_and(|f| ae.start_day < f) => {
                    issue(&ae.ae_id, "related but starts before first dose".into());
                }
                Causality::NotRelated if kb.is_study_drug_toxicity(&ae.term) => {
                    let near_dose = p.exposures.iter().any(|e| {
                        (0..=windows::CAUSALITY).contains(&(ae.start_day - e.start_day))
                    });
                    if near_dose {
                        issue(&ae.ae_id, "known toxicity soon after dosing marked not related".into());
                    }
                }
                _ => {}
            }
        }
        for e in &events {
            if !matches!(e.kind, DoseEventKind::Reduction | DoseEventKind::Interruption) {
                continue;
            }
            let explained = p.adverse_events.iter().any(|ae| {
                action_matches(e.kind, ae.action_taken)
                    && (e.day - windows::DOSE_ACTION..=e.day).contains(&ae.start_day)
            });
            if !explained {
                issue(&e.ex_id, format!("{:?} on day {} without documented action", e.kind, e.day));
            }
        }
    }
    issues
}
