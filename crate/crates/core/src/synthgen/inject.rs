//! Stratified discrepancy injection with reversible ground truth.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::coherence::{action_matches, check_coherence, graded_labs_near};
use super::{windows, SynthError};
use crate::category::Category;
use crate::data::{
    ActionTaken, Causality, DoseEventKind, Domain, LabResult, SourceRef, StudyDataset,
};
use crate::knowledge::KnowledgeBase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    /// Fraction of eligible records to corrupt.
    pub rate: f64,
    pub seed: u64,
    /// Relative share of each category, in category order.
    #[serde(default = "equal_weights")]
    pub category_weights: [f64; 6],
}

fn equal_weights() -> [f64; 6] {
    [1.0; 6]
}

impl Default for InjectionPlan {
    fn default() -> Self {
        InjectionPlan {
            rate: 0.10,
            seed: 0,
            category_weights: equal_weights(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Conmed drug replaced by one not indicated for its AE.
    DrugSwapped,
    /// Conmed start moved outside the AE window.
    ConmedShifted,
    /// AE grade rewritten against narrative or lab evidence.
    GradeRewritten,
    /// Dose action documented without an exposure change.
    ActionAdded,
    /// Dose action erased while the exposure change remains.
    ActionRemoved,
    /// Exposure dose changed with no AE action documenting it.
    DoseChanged,
    /// Known toxicity shortly after dosing marked not related.
    MarkedNotRelated,
    /// Onset moved before first dose and causality set to related.
    MovedBeforeDosing,
    /// Abnormal labs around onset of a lab-gradeable AE deleted.
    SupportingLabsRemoved,
}

impl Transform {
    pub fn category(self) -> Category {
        match self {
            Transform::DrugSwapped => Category::InappropriateConmed,
            Transform::ConmedShifted => Category::ConmedTiming,
            Transform::GradeRewritten => Category::Severity,
            Transform::ActionAdded | Transform::ActionRemoved | Transform::DoseChanged => Category::DoseChange,
            Transform::MarkedNotRelated | Transform::MovedBeforeDosing => Category::Causality,
            Transform::SupportingLabsRemoved => Category::NoSupportingData,
        }
    }
}

/// One injected discrepancy. `original_value` and `corrupted_value` hold the
/// full record before and after the change; for removed labs they hold the
/// removed lab records with their positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub record_id: String,
    pub patient_id: String,
    pub category: Category,
    pub domain: Domain,
    pub transform: Transform,
    pub original_value: Value,
    pub corrupted_value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub seed: u64,
    pub rate: f64,
    pub eligible_points: usize,
    pub annotations: Vec<Annotation>,
}

impl TruthFile {
    pub fn category_counts(&self) -> [usize; 6] {
        let mut counts = [0; 6];
        for a in &self.annotations {
            counts[a.category.index()] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct InjectionResult {
    pub corrupted: StudyDataset,
    pub truth: TruthFile,
    pub warnings: Vec<String>,
}

/// Records that count as data points for the injection rate.
pub fn eligible_points(ds: &StudyDataset) -> usize {
    ds.adverse_events.len() + ds.conmeds.len() + ds.exposures.len() + ds.labs.len()
}

pub fn inject_discrepancies(
    clean: &StudyDataset,
    kb: &KnowledgeBase,
    plan: &InjectionPlan,
) -> Result<InjectionResult, SynthError> {
    if !(0.0..=1.0).contains(&plan.rate) {
        return Err(SynthError::BadRate(plan.rate));
    }
    let weight_sum: f64 = plan.category_weights.iter().sum();
    if plan.category_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weight_sum <= 0.0 {
        return Err(SynthError::BadWeights);
    }
    clean.validate()?;
    let issues = check_coherence(clean, kb);
    if !issues.is_empty() {
        return Err(SynthError::Incoherent(issues));
    }

    let eligible = eligible_points(clean);
    let total = (plan.rate * eligible as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let quotas = quotas(total, &plan.category_weights, &mut rng);
    let mut warnings = Vec::new();
    if total > 0 && total < Category::ALL.len() {
        warnings.push(format!(
            "only {total} discrepancies for {} categories; stratification is partial",
            Category::ALL.len()
        ));
    }

    let mut candidates: Vec<Vec<String>> = Category::ALL.iter().map(|&c| candidate_ids(clean, kb, c)).collect();
    for list in &mut candidates {
        list.shuffle(&mut rng);
    }

    let mut work = clean.clone();
    let mut injector = Injector {
        kb,
        rng: &mut rng,
        used: HashSet::new(),
    };
    let mut annotations = Vec::with_capacity(total);
    let mut cursor = [0usize; 6];
    let mut placed = [0usize; 6];
    loop {
        let mut progress = false;
        for category in Category::ALL {
            let c = category.index();
            if placed[c] >= quotas[c] {
                continue;
            }
            while cursor[c] < candidates[c].len() {
                let id = &candidates[c][cursor[c]];
                cursor[c] += 1;
                if injector.used.contains(id) {
                    continue;
                }
                if let Some(annotation) = injector.inject(&mut work, category, id) {
                    injector.used.insert(id.clone());
                    annotations.push(annotation);
                    placed[c] += 1;
                    progress = true;
                    break;
                }
            }
        }
        if !progress {
            break;
        }
    }
    for category in Category::ALL {
        let c = category.index();
        if placed[c] < quotas[c] {
            return Err(SynthError::InsufficientCandidates {
                category: category.number(),
                placed: placed[c],
                quota: quotas[c],
            });
        }
    }

    Ok(InjectionResult {
        corrupted: work,
        truth: TruthFile {
            seed: plan.seed,
            rate: plan.rate,
            eligible_points: eligible,
            annotations,
        },
        warnings,
    })
}

/// Largest-remainder apportionment; ties go to a seeded random order.
fn quotas(total: usize, weights: &[f64; 6], rng: &mut ChaCha8Rng) -> [usize; 6] {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out = [0usize; 6];
    for (q, e) in out.iter_mut().zip(&exact) {
        *q = e.floor() as usize;
    }
    let remainder = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..6).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite")
    });
    for &i in order.iter().take(remainder) {
        out[i] += 1;
    }
    out
}

fn candidate_ids(ds: &StudyDataset, kb: &KnowledgeBase, category: Category) -> Vec<String> {
    let linked_conmeds = || {
        ds.conmeds
            .iter()
            .filter(|c| c.linked_ae_id.is_some())
            .map(|c| c.cm_id.clone())
            .collect::<Vec<_>>()
    };
    let aes = || ds.adverse_events.iter().map(|a| a.ae_id.clone());
    match category {
        Category::InappropriateConmed | Category::ConmedTiming => linked_conmeds(),
        Category::Severity | Category::Causality => aes().collect(),
        Category::DoseChange => aes().chain(ds.exposures.iter().map(|e| e.ex_id.clone())).collect(),
        Category::NoSupportingData => ds
            .adverse_events
            .iter()
            .filter(|a| kb.grading_rule(&a.term).is_some())
            .map(|a| a.ae_id.clone())
            .collect(),
    }
}

struct Injector<'a, 'r> {
    kb: &'a KnowledgeBase,
    rng: &'r mut ChaCha8Rng,
    used: HashSet<String>,
}

fn to_value<T: Serialize>(record: &T) -> Value {
    serde_json::to_value(record).expect("records serialize")
}

impl Injector<'_, '_> {
    fn inject(&mut self, ds: &mut StudyDataset, category: Category, id: &str) -> Option<Annotation> {
        match category {
            Category::InappropriateConmed => self.swap_drug(ds, id),
            Category::ConmedTiming => self.shift_conmed(ds, id),
            Category::Severity => self.rewrite_grade(ds, id),
            Category::DoseChange => {
                if ds.adverse_event(id).is_some() {
                    self.flip_action(ds, id)
                } else {
                    self.change_dose(ds, id)
                }
            }
            Category::Causality => self.corrupt_causality(ds, id),
            Category::NoSupportingData => self.remove_support(ds, id),
        }
    }

    fn swap_drug(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let idx = ds.conmeds.iter().position(|c| c.cm_id == id)?;
        let cm = &ds.conmeds[idx];
        let ae = ds.adverse_event(cm.linked_ae_id.as_deref()?)?;
        let term = self.kb.canonical(&ae.term);
        let options: Vec<_> = self
            .kb
            .drugs()
            .filter(|d| {
                !d.treats_nothing
                    && !d.is_hepatotoxic
                    && d.drug_class.as_deref() != Some("chemotherapy")
                    && !d.indications.contains(&term)
                    && d.drug_name != cm.drug_name
            })
            .collect();
        let drug = options.choose(self.rng)?;
        let before = ds.conmeds[idx].clone();
        let cm = &mut ds.conmeds[idx];
        cm.drug_name = drug.drug_name.clone();
        cm.dose_text = drug.default_dose.clone();
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: cm.patient_id.clone(),
            category: Category::InappropriateConmed,
            domain: Domain::ConcomitantMedications,
            transform: Transform::DrugSwapped,
            original_value: to_value(&before),
            corrupted_value: to_value(&*cm),
        })
    }

    fn shift_conmed(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let idx = ds.conmeds.iter().position(|c| c.cm_id == id)?;
        let ae = ds.adverse_event(ds.conmeds[idx].linked_ae_id.as_deref()?)?;
        let gap = self.rng.gen_range(2..=10);
        let new_start = match ae.end_day {
            Some(end) => end + windows::CONMED_TIMING + gap,
            None => ae.start_day - windows::CONMED_TIMING - gap,
        };
        let before = ds.conmeds[idx].clone();
        let cm = &mut ds.conmeds[idx];
        cm.end_day = cm.end_day.map(|e| new_start + (e - cm.start_day));
        cm.start_day = new_start;
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: cm.patient_id.clone(),
            category: Category::ConmedTiming,
            domain: Domain::ConcomitantMedications,
            transform: Transform::ConmedShifted,
            original_value: to_value(&before),
            corrupted_value: to_value(&*cm),
        })
    }

    fn rewrite_grade(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let idx = ds.adverse_events.iter().position(|a| a.ae_id == id)?;
        let ae = &ds.adverse_events[idx];
        let cue = self.kb.narrative_min_grade(&ae.narrative).map_or(0, |(g, _)| g);
        let has_lab = self.kb.grading_rule(&ae.term).is_some_and(|rule| {
            let labs: Vec<&LabResult> = ds.labs.iter().filter(|l| l.patient_id == ae.patient_id).collect();
            !graded_labs_near(&labs, rule, ae.start_day, windows::SEVERITY_LAB).is_empty()
        });
        let new_grade = if ae.grade >= 2 && (cue >= 2 || has_lab) {
            1
        } else if ae.grade == 1 && has_lab {
            3
        } else {
            return None;
        };
        let before = ae.clone();
        let ae = &mut ds.adverse_events[idx];
        ae.grade = new_grade;
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: ae.patient_id.clone(),
            category: Category::Severity,
            domain: Domain::AdverseEvents,
            transform: Transform::GradeRewritten,
            original_value: to_value(&before),
            corrupted_value: to_value(&*ae),
        })
    }

    fn flip_action(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let idx = ds.adverse_events.iter().position(|a| a.ae_id == id)?;
        let ae = &ds.adverse_events[idx];
        let p = ds.patient_records(&ae.patient_id)?;
        let events = p.dose_events();
        let (new_action, transform) = match ae.action_taken {
            ActionTaken::None => {
                let window = ae.start_day..=ae.start_day + windows::DOSE_ACTION;
                let reduced = events
                    .iter()
                    .any(|e| e.kind == DoseEventKind::Reduction && window.contains(&e.day));
                if reduced || p.exposures.is_empty() {
                    return None;
                }
                (ActionTaken::DoseReduced, Transform::ActionAdded)
            }
            action @ (ActionTaken::DoseReduced | ActionTaken::DoseInterrupted) => {
                let event = events.iter().find(|e| {
                    action_matches(e.kind, action)
                        && (ae.start_day..=ae.start_day + windows::DOSE_ACTION).contains(&e.day)
                })?;
                let explained_elsewhere = p.adverse_events.iter().any(|other| {
                    other.ae_id != ae.ae_id
                        && action_matches(event.kind, other.action_taken)
                        && (event.day - windows::DOSE_ACTION..=event.day).contains(&other.start_day)
                });
                if explained_elsewhere {
                    return None;
                }
                (ActionTaken::None, Transform::ActionRemoved)
            }
            ActionTaken::DrugWithdrawn => return None,
        };
        let before = ae.clone();
        let ae = &mut ds.adverse_events[idx];
        ae.action_taken = new_action;
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: ae.patient_id.clone(),
            category: Category::DoseChange,
            domain: Domain::AdverseEvents,
            transform,
            original_value: to_value(&before),
            corrupted_value: to_value(&*ae),
        })
    }

    fn change_dose(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let ex = ds.exposures.iter().find(|e| e.ex_id == id)?;
        let p = ds.patient_records(&ex.patient_id)?;
        let mut sorted = p.exposures.clone();
        sorted.sort_by_key(|e| e.start_day);
        let pos = sorted.iter().position(|e| e.ex_id == id)?;
        let prev = sorted.get(pos.checked_sub(1)?)?;
        let contiguous = prev.end_day + 1 == ex.start_day && prev.dose_mg == ex.dose_mg;
        let next_ok = sorted.get(pos + 1).is_none_or(|n| n.dose_mg == ex.dose_mg);
        let window = ex.start_day - windows::DOSE_ACTION..=ex.start_day;
        let actioned_nearby = p
            .adverse_events
            .iter()
            .any(|a| a.action_taken != ActionTaken::None && window.contains(&a.start_day));
        if !contiguous || !next_ok || actioned_nearby {
            return None;
        }
        let idx = ds.exposures.iter().position(|e| e.ex_id == id)?;
        let before = ds.exposures[idx].clone();
        let ex = &mut ds.exposures[idx];
        ex.dose_mg /= 2.0;
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: ex.patient_id.clone(),
            category: Category::DoseChange,
            domain: Domain::Exposure,
            transform: Transform::DoseChanged,
            original_value: to_value(&before),
            corrupted_value: to_value(&*ex),
        })
    }

    fn corrupt_causality(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let idx = ds.adverse_events.iter().position(|a| a.ae_id == id)?;
        let ae = &ds.adverse_events[idx];
        let p = ds.patient_records(&ae.patient_id)?;
        let first_dose = p.first_exposure_day()?;
        let near_dose = p
            .exposures
            .iter()
            .any(|e| (0..=windows::CAUSALITY).contains(&(ae.start_day - e.start_day)));
        let can_deny = self.kb.is_study_drug_toxicity(&ae.term) && ae.causality != Causality::NotRelated && near_dose;
        let can_backdate = self.kb.grading_rule(&ae.term).is_none()
            && ae.action_taken == ActionTaken::None
            && !p.conmeds.iter().any(|c| c.linked_ae_id.as_deref() == Some(id));
        let earliest = p.patient.enrollment_day.max(first_dose - 10);
        let backdate = can_backdate && earliest < first_dose && (!can_deny || self.rng.gen_bool(0.5));
        if !can_deny && !backdate {
            return None;
        }
        let new_start = backdate.then(|| self.rng.gen_range(earliest..first_dose));
        let before = ae.clone();
        let ae = &mut ds.adverse_events[idx];
        let transform = match new_start {
            Some(start) => {
                ae.start_day = start;
                ae.causality = Causality::Related;
                Transform::MovedBeforeDosing
            }
            None => {
                ae.causality = Causality::NotRelated;
                Transform::MarkedNotRelated
            }
        };
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: ae.patient_id.clone(),
            category: Category::Causality,
            domain: Domain::AdverseEvents,
            transform,
            original_value: to_value(&before),
            corrupted_value: to_value(&*ae),
        })
    }

    fn remove_support(&mut self, ds: &mut StudyDataset, id: &str) -> Option<Annotation> {
        let ae = ds.adverse_event(id)?.clone();
        let rule = self.kb.grading_rule(&ae.term)?;
        let doomed: Vec<usize> = ds
            .labs
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                l.patient_id == ae.patient_id
                    && l.analyte == rule.analyte
                    && rule.grade(l.value).is_some()
                    && (l.collection_day - ae.start_day).abs() <= windows::SUPPORTING_LAB
            })
            .map(|(i, _)| i)
            .collect();
        if doomed.is_empty() || doomed.iter().any(|&i| self.used.contains(&ds.labs[i].lab_id)) {
            return None;
        }
        let mut removed = Vec::with_capacity(doomed.len());
        for &i in doomed.iter().rev() {
            let lab = ds.labs.remove(i);
            let source = ds.provenance.remove(&lab.lab_id);
            self.used.insert(lab.lab_id.clone());
            removed.push(json!({"index": i, "record": lab, "source": source}));
        }
        removed.reverse();
        Some(Annotation {
            record_id: id.to_string(),
            patient_id: ae.patient_id.clone(),
            category: Category::NoSupportingData,
            domain: Domain::AdverseEvents,
            transform: Transform::SupportingLabsRemoved,
            original_value: json!({ "labs": removed }),
            corrupted_value: json!({ "labs": [] }),
        })
    }
}

#[derive(Deserialize)]
struct RemovedLab {
    index: usize,
    record: LabResult,
    source: Option<SourceRef>,
}

/// Undoes every annotation, newest first.
pub fn revert(corrupted: &StudyDataset, truth: &TruthFile) -> Result<StudyDataset, SynthError> {
    let mut ds = corrupted.clone();
    for a in truth.annotations.iter().rev() {
        if a.transform == Transform::SupportingLabsRemoved {
            let labs: Vec<RemovedLab> = serde_json::from_value(a.original_value["labs"].clone())
                .map_err(|e| SynthError::Revert(format!("{}: {e}", a.record_id)))?;
            for removed in labs {
                if removed.index > ds.labs.len() {
                    return Err(SynthError::Revert(format!("{}: lab index out of range", a.record_id)));
                }
                if let Some(source) = removed.source {
                    ds.provenance.insert(removed.record.lab_id.clone(), source);
                }
                ds.labs.insert(removed.index, removed.record);
            }
            continue;
        }
        match a.domain {
            Domain::AdverseEvents => restore(&mut ds.adverse_events, |r| &r.ae_id, a)?,
            Domain::ConcomitantMedications => restore(&mut ds.conmeds, |r| &r.cm_id, a)?,
            Domain::Exposure => restore(&mut ds.exposures, |r| &r.ex_id, a)?,
            other => {
                return Err(SynthError::Revert(format!(
                    "{}: unexpected domain {}",
                    a.record_id,
                    other.name()
                )))
            }
        }
    }
    Ok(ds)
}

fn restore<T: DeserializeOwned>(records: &mut [T], key: impl Fn(&T) -> &String, a: &Annotation) -> Result<(), SynthError> {
    let slot = records
        .iter_mut()
        .find(|r| *key(r) == a.record_id)
        .ok_or_else(|| SynthError::Revert(format!("record {} not found", a.record_id)))?;
    *slot = serde_json::from_value(a.original_value.clone())
        .map_err(|e| SynthError::Revert(format!("{}: {e}", a.record_id)))?;
    Ok(())
}
