//! Small hand-built record fixtures for unit tests.

use crate::data::*;
use crate::knowledge::KnowledgeBase;

pub fn patient(pid: &str) -> Patient {
    Patient {
        patient_id: pid.into(),
        age: 50,
        sex: Sex::Female,
        enrollment_day: -7,
    }
}

pub fn ae(id: &str, pid: &str, term: &str, grade: u8, start: i32, end: Option<i32>) -> AdverseEvent {
    AdverseEvent {
        ae_id: id.into(),
        patient_id: pid.into(),
        term: term.into(),
        narrative: String::new(),
        grade,
        start_day: start,
        end_day: end,
        causality: Causality::PossiblyRelated,
        action_taken: ActionTaken::None,
        serious: grade >= 3,
    }
}

pub fn conmed(id: &str, pid: &str, drug: &str, linked: Option<&str>, start: i32, end: Option<i32>) -> ConcomitantMedication {
    ConcomitantMedication {
        cm_id: id.into(),
        patient_id: pid.into(),
        drug_name: drug.into(),
        indication_text: String::new(),
        linked_ae_id: linked.map(str::to_string),
        start_day: start,
        end_day: end,
        dose_text: String::new(),
    }
}

pub fn lab(id: &str, pid: &str, analyte: Analyte, value: f64, day: i32) -> LabResult {
    let range = KnowledgeBase::builtin().normal_range(analyte);
    LabResult {
        lab_id: id.into(),
        patient_id: pid.into(),
        analyte,
        value,
        units: analyte.units().into(),
        collection_day: day,
        normal_low: range.low,
        normal_high: range.high,
    }
}

pub fn exposure(id: &str, pid: &str, dose: f64, start: i32, end: i32) -> ExposureRecord {
    ExposureRecord {
        ex_id: id.into(),
        patient_id: pid.into(),
        dose_mg: dose,
        start_day: start,
        end_day: end,
    }
}

pub fn vital(id: &str, pid: &str, day: i32, weight: f64) -> VitalSign {
    VitalSign {
        vs_id: id.into(),
        patient_id: pid.into(),
        day,
        weight_kg: weight,
        systolic_bp: 120,
        diastolic_bp: 80,
    }
}

pub fn history(id: &str, pid: &str, condition: &str) -> MedicalHistoryItem {
    MedicalHistoryItem {
        mh_id: id.into(),
        patient_id: pid.into(),
        condition: condition.into(),
        pre_study: true,
    }
}

/// One patient, `P1`, dosed at 100 mg from day 1 to day 42.
pub fn one_patient() -> StudyDataset {
    StudyDataset {
        patients: vec![patient("P1")],
        exposures: vec![exposure("EX1", "P1", 100.0, 1, 42)],
        ..Default::default()
    }
}
