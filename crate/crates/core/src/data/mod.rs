//! Harmonized CRF data model.
//!
//! A [`StudyDataset`] holds the eight case-report-form domains used by the
//! detectors (demographics, adverse events, concomitant medications, labs,
//! vitals, exposure, medical history, procedures) together with a provenance
//! map that ties every record back to the file and row it came from.
//!
//! All dates are study-day integers: day 1 is the first dose, negative days
//! are pre-treatment.

mod audit;
mod io;

pub use audit::{AuditAction, AuditEntry, AuditError, AuditLog};
pub use io::{export_dataset, import_dataset, Domain, DOMAINS};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: row {row}, column {column}: {message}")]
    Malformed {
        file: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("referential integrity violated: {}", offenders.join("; "))]
    Integrity { offenders: Vec<String> },
    #[error("missing CRF file for domain {domain} in {directory}")]
    MissingFile { domain: String, directory: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub age: u32,
    pub sex: Sex,
    pub enrollment_day: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causality {
    Related,
    PossiblyRelated,
    NotRelated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTaken {
    None,
    DoseReduced,
    DoseInterrupted,
    DrugWithdrawn,
}

impl ActionTaken {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionTaken::None => "none",
            ActionTaken::DoseReduced => "dose_reduced",
            ActionTaken::DoseInterrupted => "dose_interrupted",
            ActionTaken::DrugWithdrawn => "drug_withdrawn",
        }
    }
}

impl Causality {
    pub fn as_str(self) -> &'static str {
        match self {
            Causality::Related => "related",
            Causality::PossiblyRelated => "possibly_related",
            Causality::NotRelated => "not_related",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdverseEvent {
    pub ae_id: String,
    pub patient_id: String,
    pub term: String,
    pub narrative: String,
    pub grade: u8,
    pub start_day: i32,
    /// `None` means the event is ongoing.
    pub end_day: Option<i32>,
    pub causality: Causality,
    pub action_taken: ActionTaken,
    pub serious: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcomitantMedication {
    pub cm_id: String,
    pub patient_id: String,
    pub drug_name: String,
    pub indication_text: String,
    pub linked_ae_id: Option<String>,
    pub start_day: i32,
    pub end_day: Option<i32>,
    pub dose_text: String,
}

/// Lab analytes with fixed reporting units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analyte {
    Hemoglobin,
    Platelets,
    Neutrophils,
    Alt,
    Ast,
    Bilirubin,
    Creatinine,
    Potassium,
    Sodium,
    Bnp,
}

impl Analyte {
    pub const ALL: [Analyte; 10] = [
        Analyte::Hemoglobin,
        Analyte::Platelets,
        Analyte::Neutrophils,
        Analyte::Alt,
        Analyte::Ast,
        Analyte::Bilirubin,
        Analyte::Creatinine,
        Analyte::Potassium,
        Analyte::Sodium,
        Analyte::Bnp,
    ];

    pub fn units(self) -> &'static str {
        match self {
            Analyte::Hemoglobin => "g/dL",
            Analyte::Platelets | Analyte::Neutrophils => "10^9/L",
            Analyte::Alt | Analyte::Ast => "U/L",
            Analyte::Bilirubin | Analyte::Creatinine => "mg/dL",
            Analyte::Potassium | Analyte::Sodium => "mmol/L",
            Analyte::Bnp => "pg/mL",
        }
    }

    /// Decimal places used when reporting values.
    pub fn decimals(self) -> u32 {
        match self {
            Analyte::Platelets | Analyte::Alt | Analyte::Ast | Analyte::Sodium | Analyte::Bnp => 0,
            Analyte::Creatinine => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Analyte::Hemoglobin => "hemoglobin",
            Analyte::Platelets => "platelets",
            Analyte::Neutrophils => "neutrophils",
            Analyte::Alt => "alt",
            Analyte::Ast => "ast",
            Analyte::Bilirubin => "bilirubin",
            Analyte::Creatinine => "creatinine",
            Analyte::Potassium => "potassium",
            Analyte::Sodium => "sodium",
            Analyte::Bnp => "bnp",
        }
    }
}

impl fmt::Display for Analyte {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabResult {
    pub lab_id: String,
    pub patient_id: String,
    pub analyte: Analyte,
    pub value: f64,
    pub units: String,
    pub collection_day: i32,
    pub normal_low: f64,
    pub normal_high: f64,
}

impl LabResult {
    pub fn is_low(&self) -> bool {
        self.value < self.normal_low
    }

    pub fn is_high(&self) -> bool {
        self.value > self.normal_high
    }

    pub fn is_abnormal(&self) -> bool {
        self.is_low() || self.is_high()
    }

    /// Distance outside the normal range, 0 when within it.
    pub fn excursion(&self) -> f64 {
        if self.is_low() {
            self.normal_low - self.value
        } else if self.is_high() {
            self.value - self.normal_high
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalSign {
    pub vs_id: String,
    pub patient_id: String,
    pub day: i32,
    pub weight_kg: f64,
    pub systolic_bp: u32,
    pub diastolic_bp: u32,
}

/// Study-drug administration at a constant dose over `[start_day, end_day]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub ex_id: String,
    pub patient_id: String,
    pub dose_mg: f64,
    pub start_day: i32,
    pub end_day: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalHistoryItem {
    pub mh_id: String,
    pub patient_id: String,
    pub condition: String,
    pub pre_study: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Procedure {
    pub pr_id: String,
    pub patient_id: String,
    pub name: String,
    pub day: i32,
}

/// Where a record was read from. Rows are 1-based data rows (header excluded).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub file: String,
    pub row: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyDataset {
    pub patients: Vec<Patient>,
    pub adverse_events: Vec<AdverseEvent>,
    pub conmeds: Vec<ConcomitantMedication>,
    pub labs: Vec<LabResult>,
    pub vitals: Vec<VitalSign>,
    pub exposures: Vec<ExposureRecord>,
    pub medical_history: Vec<MedicalHistoryItem>,
    pub procedures: Vec<Procedure>,
    #[serde(default)]
    pub provenance: BTreeMap<String, SourceRef>,
}

/// A borrowed view of every record belonging to one patient.
#[derive(Debug, Clone, Serialize)]
pub struct PatientRecords<'a> {
    pub patient: &'a Patient,
    pub adverse_events: Vec<&'a AdverseEvent>,
    pub conmeds: Vec<&'a ConcomitantMedication>,
    pub labs: Vec<&'a LabResult>,
    pub vitals: Vec<&'a VitalSign>,
    pub exposures: Vec<&'a ExposureRecord>,
    pub medical_history: Vec<&'a MedicalHistoryItem>,
    pub procedures: Vec<&'a Procedure>,
}

/// A change in study-drug administration derived from consecutive exposure records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseEvent {
    pub day: i32,
    pub kind: DoseEventKind,
    /// Exposure record that ends at (interruption, stop) or starts at
    /// (reduction, increase) the event.
    pub ex_id: String,
    pub from_mg: f64,
    pub to_mg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseEventKind {
    Reduction,
    Increase,
    Interruption,
    /// Administration ends; also produced by the planned end of treatment.
    Stop,
}

/// Dose events for one patient's exposure records, in day order.
pub fn dose_events(exposures: &[&ExposureRecord]) -> Vec<DoseEvent> {
    let mut sorted: Vec<&ExposureRecord> = exposures.to_vec();
    sorted.sort_by_key(|e| (e.start_day, e.end_day));
    let mut events = Vec::new();
    for pair in sorted.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next.start_day > prev.end_day + 1 {
            events.push(DoseEvent {
                day: prev.end_day + 1,
                kind: DoseEventKind::Interruption,
                ex_id: prev.ex_id.clone(),
                from_mg: prev.dose_mg,
                to_mg: 0.0,
            });
        }
        if next.dose_mg != prev.dose_mg {
            events.push(DoseEvent {
                day: next.start_day,
                kind: if next.dose_mg < prev.dose_mg {
                    DoseEventKind::Reduction
                } else {
                    DoseEventKind::Increase
                },
                ex_id: next.ex_id.clone(),
                from_mg: prev.dose_mg,
                to_mg: next.dose_mg,
            });
        }
    }
    if let Some(last) = sorted.last() {
        events.push(DoseEvent {
            day: last.end_day + 1,
            kind: DoseEventKind::Stop,
            ex_id: last.ex_id.clone(),
            from_mg: last.dose_mg,
            to_mg: 0.0,
        });
    }
    events
}

impl PatientRecords<'_> {
    pub fn first_exposure_day(&self) -> Option<i32> {
        self.exposures.iter().map(|e| e.start_day).min()
    }

    pub fn adverse_event(&self, ae_id: &str) -> Option<&AdverseEvent> {
        self.adverse_events.iter().copied().find(|a| a.ae_id == ae_id)
    }

    pub fn dose_events(&self) -> Vec<DoseEvent> {
        dose_events(&self.exposures)
    }

    /// The record with `id` in any domain, as JSON.
    pub fn record_value(&self, id: &str) -> Option<(Domain, serde_json::Value)> {
        fn hit<T: Serialize>(items: &[&T], domain: Domain, id: &str, key: fn(&T) -> &str) -> Option<(Domain, serde_json::Value)> {
            let r = items.iter().find(|r| key(r) == id)?;
            Some((domain, serde_json::to_value(r).expect("records serialize")))
        }
        if self.patient.patient_id == id {
            return Some((Domain::Demographics, serde_json::to_value(self.patient).expect("records serialize")));
        }
        hit(&self.adverse_events, Domain::AdverseEvents, id, |r| &r.ae_id)
            .or_else(|| hit(&self.conmeds, Domain::ConcomitantMedications, id, |r| &r.cm_id))
            .or_else(|| hit(&self.labs, Domain::Labs, id, |r| &r.lab_id))
            .or_else(|| hit(&self.exposures, Domain::Exposure, id, |r| &r.ex_id))
            .or_else(|| hit(&self.vitals, Domain::Vitals, id, |r| &r.vs_id))
            .or_else(|| hit(&self.medical_history, Domain::MedicalHistory, id, |r| &r.mh_id))
            .or_else(|| hit(&self.procedures, Domain::Procedures, id, |r| &r.pr_id))
    }

    /// Last day with any observation; ongoing events extend to this day.
    pub fn last_observed_day(&self) -> i32 {
        let mut last = self.patient.enrollment_day;
        for ae in &self.adverse_events {
            last = last.max(ae.end_day.unwrap_or(ae.start_day));
        }
        for cm in &self.conmeds {
            last = last.max(cm.end_day.unwrap_or(cm.start_day));
        }
        for lab in &self.labs {
            last = last.max(lab.collection_day);
        }
        for vs in &self.vitals {
            last = last.max(vs.day);
        }
        for ex in &self.exposures {
            last = last.max(ex.end_day);
        }
        for pr in &self.procedures {
            last = last.max(pr.day);
        }
        last
    }
}

impl StudyDataset {
    pub fn patient(&self, patient_id: &str) -> Option<&Patient> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    pub fn patient_records(&self, patient_id: &str) -> Option<PatientRecords<'_>> {
        let patient = self.patient(patient_id)?;
        let of = |pid: &str| pid == patient_id;
        Some(PatientRecords {
            patient,
            adverse_events: self.adverse_events.iter().filter(|r| of(&r.patient_id)).collect(),
            conmeds: self.conmeds.iter().filter(|r| of(&r.patient_id)).collect(),
            labs: self.labs.iter().filter(|r| of(&r.patient_id)).collect(),
            vitals: self.vitals.iter().filter(|r| of(&r.patient_id)).collect(),
            exposures: self.exposures.iter().filter(|r| of(&r.patient_id)).collect(),
            medical_history: self.medical_history.iter().filter(|r| of(&r.patient_id)).collect(),
            procedures: self.procedures.iter().filter(|r| of(&r.patient_id)).collect(),
        })
    }

    /// Per-patient views in patient order, built in a single pass.
    pub fn by_patient(&self) -> Vec<PatientRecords<'_>> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut views: Vec<PatientRecords<'_>> = Vec::with_capacity(self.patients.len());
        for patient in &self.patients {
            index.insert(patient.patient_id.as_str(), views.len());
            views.push(PatientRecords {
                patient,
                adverse_events: Vec::new(),
                conmeds: Vec::new(),
                labs: Vec::new(),
                vitals: Vec::new(),
                exposures: Vec::new(),
                medical_history: Vec::new(),
                procedures: Vec::new(),
            });
        }
        macro_rules! bucket {
            ($field:ident) => {
                for r in &self.$field {
                    if let Some(&i) = index.get(r.patient_id.as_str()) {
                        views[i].$field.push(r);
                    }
                }
            };
        }
        bucket!(adverse_events);
        bucket!(conmeds);
        bucket!(labs);
        bucket!(vitals);
        bucket!(exposures);
        bucket!(medical_history);
        bucket!(procedures);
        views
    }

    pub fn adverse_event(&self, ae_id: &str) -> Option<&AdverseEvent> {
        self.adverse_events.iter().find(|a| a.ae_id == ae_id)
    }

    /// Last study day observed anywhere in the dataset. Ongoing adverse
    /// events are treated as extending to this day.
    pub fn last_observed_day(&self) -> i32 {
        let days = self
            .patients
            .iter()
            .map(|p| p.enrollment_day)
            .chain(self.adverse_events.iter().map(|r| r.end_day.unwrap_or(r.start_day)))
            .chain(self.conmeds.iter().map(|r| r.end_day.unwrap_or(r.start_day)))
            .chain(self.labs.iter().map(|r| r.collection_day))
            .chain(self.vitals.iter().map(|r| r.day))
            .chain(self.exposures.iter().map(|r| r.end_day))
            .chain(self.procedures.iter().map(|r| r.day));
        days.max().unwrap_or(0)
    }

    pub fn record_count(&self) -> usize {
        self.patients.len()
            + self.adverse_events.len()
            + self.conmeds.len()
            + self.labs.len()
            + self.vitals.len()
            + self.exposures.len()
            + self.medical_history.len()
            + self.procedures.len()
    }

    /// Record ids paired with their domain, in domain order.
    pub fn record_ids(&self) -> Vec<(Domain, &str)> {
        let mut out = Vec::with_capacity(self.record_count());
        out.extend(self.patients.iter().map(|r| (Domain::Demographics, r.patient_id.as_str())));
        out.extend(self.adverse_events.iter().map(|r| (Domain::AdverseEvents, r.ae_id.as_str())));
        out.extend(self.conmeds.iter().map(|r| (Domain::ConcomitantMedications, r.cm_id.as_str())));
        out.extend(self.labs.iter().map(|r| (Domain::Labs, r.lab_id.as_str())));
        out.extend(self.vitals.iter().map(|r| (Domain::Vitals, r.vs_id.as_str())));
        out.extend(self.exposures.iter().map(|r| (Domain::Exposure, r.ex_id.as_str())));
        out.extend(self.medical_history.iter().map(|r| (Domain::MedicalHistory, r.mh_id.as_str())));
        out.extend(self.procedures.iter().map(|r| (Domain::Procedures, r.pr_id.as_str())));
        out
    }

    /// Sorts each domain by record id. Canonical order for comparison and export.
    pub fn canonicalize(&mut self) {
        self.patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        self.adverse_events.sort_by(|a, b| a.ae_id.cmp(&b.ae_id));
        self.conmeds.sort_by(|a, b| a.cm_id.cmp(&b.cm_id));
        self.labs.sort_by(|a, b| a.lab_id.cmp(&b.lab_id));
        self.vitals.sort_by(|a, b| a.vs_id.cmp(&b.vs_id));
        self.exposures.sort_by(|a, b| a.ex_id.cmp(&b.ex_id));
        self.medical_history.sort_by(|a, b| a.mh_id.cmp(&b.mh_id));
        self.procedures.sort_by(|a, b| a.pr_id.cmp(&b.pr_id));
    }

    /// Rebuilds provenance for in-memory records as if they had been read
    /// from `<label>/<domain file>` in their current order.
    pub fn assign_provenance(&mut self, label: &str) {
        let mut provenance = BTreeMap::new();
        let mut row_of: BTreeMap<Domain, usize> = BTreeMap::new();
        for (domain, id) in self.record_ids() {
            let row = row_of.entry(domain).or_insert(0);
            *row += 1;
            provenance.insert(
                id.to_string(),
                SourceRef {
                    file: format!("{label}/{}", domain.csv_name()),
                    row: *row,
                },
            );
        }
        self.provenance = provenance;
    }

    /// Record-set equality, ignoring record order and provenance.
    pub fn same_records(&self, other: &StudyDataset) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.canonicalize();
        b.canonicalize();
        a.provenance.clear();
        b.provenance.clear();
        a == b
    }

    /// Field-level invariants and referential integrity.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut offenders = Vec::new();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (domain, id) in self.record_ids() {
            if !seen.insert(id) {
                offenders.push(format!("{}: duplicate record id {id}", domain.name()));
            }
        }
        let patient_ids: BTreeSet<&str> = self.patients.iter().map(|p| p.patient_id.as_str()).collect();
        let ae_ids: BTreeMap<&str, &str> = self
            .adverse_events
            .iter()
            .map(|a| (a.ae_id.as_str(), a.patient_id.as_str()))
            .collect();
        for p in &self.patients {
            if !(18..=120).contains(&p.age) {
                offenders.push(format!("demographics {}: age {} outside 18-120", p.patient_id, p.age));
            }
        }
        let check_patient = |domain: Domain, id: &str, pid: &str, offenders: &mut Vec<String>| {
            if !patient_ids.contains(pid) {
                offenders.push(format!("{} {id}: patient_id {pid} not found", domain.name()));
            }
        };
        for r in &self.adverse_events {
            check_patient(Domain::AdverseEvents, &r.ae_id, &r.patient_id, &mut offenders);
            if !(1..=5).contains(&r.grade) {
                offenders.push(format!("adverse_events {}: grade out of range 1–5", r.ae_id));
            }
            if matches!(r.end_day, Some(end) if end < r.start_day) {
                offenders.push(format!("adverse_events {}: end_day before start_day", r.ae_id));
            }
        }
        for r in &self.conmeds {
            check_patient(Domain::ConcomitantMedications, &r.cm_id, &r.patient_id, &mut offenders);
            if let Some(linked) = &r.linked_ae_id {
                match ae_ids.get(linked.as_str()) {
                    None => offenders.push(format!(
                        "concomitant_medications {}: linked_ae_id {linked} not found",
                        r.cm_id
                    )),
                    Some(owner) if *owner != r.patient_id => offenders.push(format!(
                        "concomitant_medications {}: linked_ae_id {linked} belongs to another patient",
                        r.cm_id
                    )),
                    _ => {}
                }
            }
            if matches!(r.end_day, Some(end) if end < r.start_day) {
                offenders.push(format!("concomitant_medications {}: end_day before start_day", r.cm_id));
            }
        }
        for r in &self.labs {
            check_patient(Domain::Labs, &r.lab_id, &r.patient_id, &mut offenders);
            if r.value < 0.0 || !r.value.is_finite() {
                offenders.push(format!("labs {}: negative value", r.lab_id));
            }
            if r.normal_low >= r.normal_high {
                offenders.push(format!("labs {}: normal_low must be below normal_high", r.lab_id));
            }
        }
        for r in &self.vitals {
            check_patient(Domain::Vitals, &r.vs_id, &r.patient_id, &mut offenders);
        }
        for r in &self.exposures {
            check_patient(Domain::Exposure, &r.ex_id, &r.patient_id, &mut offenders);
            if r.end_day < r.start_day {
                offenders.push(format!("exposure {}: end_day before start_day", r.ex_id));
            }
        }
        let mut by_patient: BTreeMap<&str, Vec<&ExposureRecord>> = BTreeMap::new();
        for r in &self.exposures {
            by_patient.entry(r.patient_id.as_str()).or_default().push(r);
        }
        for records in by_patient.values_mut() {
            records.sort_by_key(|r| (r.start_day, r.end_day));
            for pair in records.windows(2) {
                if pair[1].start_day <= pair[0].end_day {
                    offenders.push(format!(
                        "exposure {}: overlaps {}",
                        pair[1].ex_id, pair[0].ex_id
                    ));
                }
            }
        }
        for r in &self.medical_history {
            check_patient(Domain::MedicalHistory, &r.mh_id, &r.patient_id, &mut offenders);
        }
        for r in &self.procedures {
            check_patient(Domain::Procedures, &r.pr_id, &r.patient_id, &mut offenders);
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(DataError::Integrity { offenders })
        }
    }
}
