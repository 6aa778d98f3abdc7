use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::library::{ElementLibrary, WeightedSet};
use crate::data::{
    ActionTaken, AdverseEvent, Analyte, Causality, ConcomitantMedication, ExposureRecord, LabResult,
    MedicalHistoryItem, Patient, Procedure, Sex, StudyDataset, VitalSign,
};
use crate::knowledge::{GradingRule, KnowledgeBase};

const CYCLE_DAYS: i32 = 21;
const DOSE_LEVELS: [f64; 4] = [100.0, 75.0, 50.0, 25.0];
const PANEL: [Analyte; 6] = [
    Analyte::Hemoglobin,
    Analyte::Platelets,
    Analyte::Neutrophils,
    Analyte::Alt,
    Analyte::Ast,
    Analyte::Creatinine,
];
const MID_PANEL_DAY: i32 = 43;
const MIN_ACTION_SPACING: i32 = 14;

const NARRATIVES: [[&str; 3]; 3] = [
    [
        "Mild {t}, monitored without treatment change.",
        "Mild {t} reported at clinic visit.",
        "Patient reports mild {t}; self-limiting.",
    ],
    [
        "Moderate {t} managed as outpatient.",
        "Moderate {t} requiring medical intervention.",
        "Moderate {t}, limiting instrumental activities.",
    ],
    [
        "Severe {t} requiring hospitalization.",
        "Severe {t}; patient hospitalized for management.",
        "Severe {t} limiting self-care activities.",
    ],
];

/// Generates `n` coherent synthetic patients.
///
/// Each patient draws from its own ChaCha stream (`seed`, stream = patient
/// index), so output does not depend on how patients are scheduled.
pub fn generate_patients(
    libraries: &ElementLibrary,
    kb: &KnowledgeBase,
    n: usize,
    seed: u64,
) -> StudyDataset {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    let parts: Vec<StudyDataset> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                s.spawn(move || {
                    (lo..(lo + chunk).min(n))
                        .map(|i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(i as u64);
                            PatientGen::new(i, libraries, kb, &mut rng).run()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("patient generation panicked"))
            .collect()
    });

    let mut ds = StudyDataset::default();
    for part in parts {
        ds.patients.extend(part.patients);
        ds.adverse_events.extend(part.adverse_events);
        ds.conmeds.extend(part.conmeds);
        ds.labs.extend(part.labs);
        ds.vitals.extend(part.vitals);
        ds.exposures.extend(part.exposures);
        ds.medical_history.extend(part.medical_history);
        ds.procedures.extend(part.procedures);
    }
    ds.canonicalize();
    ds.assign_provenance("generated");
    ds
}

struct PatientGen<'a, 'r> {
    pid: String,
    lib: &'a ElementLibrary,
    kb: &'a KnowledgeBase,
    rng: &'r mut ChaCha8Rng,
}

struct DraftConmed {
    drug: String,
    indication_text: String,
    linked: Option<usize>,
    start: i32,
    end: Option<i32>,
}

impl<'a, 'r> PatientGen<'a, 'r> {
    fn new(index: usize, lib: &'a ElementLibrary, kb: &'a KnowledgeBase, rng: &'r mut ChaCha8Rng) -> Self {
        PatientGen {
            pid: format!("P{:04}", index + 1),
            lib,
            kb,
            rng,
        }
    }

    fn id(&self, prefix: &str, i: usize) -> String {
        format!("{}-{prefix}{:02}", self.pid, i + 1)
    }

    fn run(mut self) -> StudyDataset {
        let enrollment_day = -self.rng.gen_range(1..=28);
        let patient = Patient {
            patient_id: self.pid.clone(),
            age: self.rng.gen_range(18..=85),
            sex: if self.rng.gen_bool(0.5) { Sex::Female } else { Sex::Male },
            enrollment_day,
        };
        let cycles = self.rng.gen_range(4..=6);
        let t_end = cycles * CYCLE_DAYS;

        let mut conmeds = Vec::new();
        let medical_history = self.medical_history(&mut conmeds);
        let mut aes = self.adverse_events(t_end);
        let dose = self.dose_schedule(&mut aes, t_end);
        let exposures = self.exposures(&dose);
        self.ae_conmeds(&aes, &mut conmeds);
        let (labs, vitals) = self.labs_and_vitals(&aes, enrollment_day, cycles, t_end);
        let procedures = self.procedures(t_end);

        conmeds.sort_by(|a, b| (a.start, &a.drug).cmp(&(b.start, &b.drug)));
        let conmeds = conmeds
            .into_iter()
            .enumerate()
            .map(|(i, c)| ConcomitantMedication {
                cm_id: self.id("CM", i),
                patient_id: self.pid.clone(),
                dose_text: self.kb.drug(&c.drug).map(|d| d.default_dose.clone()).unwrap_or_default(),
                drug_name: c.drug,
                indication_text: c.indication_text,
                linked_ae_id: c.linked.map(|k| aes[k].ae_id.clone()),
                start_day: c.start,
                end_day: c.end,
            })
            .collect();

        StudyDataset {
            patients: vec![patient],
            adverse_events: aes,
            conmeds,
            labs,
            vitals,
            exposures,
            medical_history,
            procedures,
            provenance: Default::default(),
        }
    }

    /// Library drugs indicated for `term`, chemotherapy excluded.
    fn treatments_for(&self, term: &str) -> WeightedSet {
        let term = self.kb.canonical(term);
        self.lib.concomitant_medications.filtered(|d| {
            self.kb.drug(d).is_some_and(|m| {
                m.drug_class.as_deref() != Some("chemotherapy") && m.indications.contains(&term)
            })
        })
    }

    fn medical_history(&mut self, conmeds: &mut Vec<DraftConmed>) -> Vec<MedicalHistoryItem> {
        let k = self.rng.gen_range(0..=3);
        let conditions: Vec<String> = self
            .lib
            .medical_history
            .sample_distinct(self.rng, k)
            .into_iter()
            .map(|c| self.kb.canonical(c))
            .collect();
        let mut items = Vec::new();
        for (i, condition) in conditions.into_iter().enumerate() {
            let pre_study = self.rng.gen_bool(0.85);
            if pre_study {
                let options = self.treatments_for(&condition);
                if !options.is_empty() && self.rng.gen_bool(0.7) {
                    let drug = options.sample(self.rng).expect("non-empty").to_string();
                    conmeds.push(DraftConmed {
                        drug,
                        indication_text: condition.clone(),
                        linked: None,
                        start: -self.rng.gen_range(30..=720),
                        end: None,
                    });
                }
            }
            items.push(MedicalHistoryItem {
                mh_id: self.id("MH", i),
                patient_id: self.pid.clone(),
                condition,
                pre_study,
            });
        }
        items
    }

    fn adverse_events(&mut self, t_end: i32) -> Vec<AdverseEvent> {
        let k = self.rng.gen_range(3..=6);
        let terms: Vec<String> = self
            .lib
            .adverse_events
            .sample_distinct(self.rng, k)
            .into_iter()
            .map(|t| self.kb.canonical(t))
            .collect();
        let mut aes: Vec<AdverseEvent> = terms
            .into_iter()
            .map(|term| {
                let start = self.rng.gen_range(2..=t_end - 7);
                let duration = self.rng.gen_range(2..=21);
                let end = (!self.rng.gen_bool(0.15)).then_some(start + duration - 1);
                let roll: f64 = self.rng.gen();
                let grade: u8 = if roll < 0.5 { 1 } else if roll < 0.85 { 2 } else { 3 };
                let toxicity = self.kb.is_study_drug_toxicity(&term);
                let causality = match (toxicity, self.rng.gen_bool(0.6)) {
                    (true, true) => Causality::Related,
                    (false, true) => Causality::NotRelated,
                    _ => Causality::PossiblyRelated,
                };
                let template = NARRATIVES[grade as usize - 1].choose(self.rng).expect("templates");
                AdverseEvent {
                    ae_id: String::new(),
                    patient_id: self.pid.clone(),
                    narrative: template.replace("{t}", &term),
                    term,
                    grade,
                    start_day: start,
                    end_day: end,
                    causality,
                    action_taken: ActionTaken::None,
                    serious: grade >= 3,
                }
            })
            .collect();
        aes.sort_by(|a, b| (a.start_day, &a.term).cmp(&(b.start_day, &b.term)));
        for (i, ae) in aes.iter_mut().enumerate() {
            ae.ae_id = self.id("AE", i);
        }
        aes
    }

    /// Daily study-drug dose (index = study day, 1-based) with actions
    /// written back onto the AEs that caused them.
    fn dose_schedule(&mut self, aes: &mut [AdverseEvent], t_end: i32) -> Vec<f64> {
        let mut dose = vec![DOSE_LEVELS[0]; t_end as usize + 1];
        dose[0] = 0.0;
        let mut level = 0;
        let mut last_action: Option<i32> = None;
        for ae in aes.iter_mut() {
            if ae.grade < 2 || !self.kb.is_study_drug_toxicity(&ae.term) {
                continue;
            }
            if last_action.is_some_and(|d| ae.start_day - d < MIN_ACTION_SPACING) {
                continue;
            }
            if !self.rng.gen_bool(0.5) {
                continue;
            }
            let day = ae.start_day + self.rng.gen_range(1..=3);
            if day > t_end - 1 || dose[day as usize - 1] == 0.0 || dose[day as usize] == 0.0 {
                continue;
            }
            let roll: f64 = self.rng.gen();
            let pause = self.rng.gen_range(3..=7);
            let can_reduce = level + 1 < DOSE_LEVELS.len();
            let action = if roll < 0.9 && roll >= 0.6 && day + pause <= t_end - 1 {
                ActionTaken::DoseInterrupted
            } else if roll < 0.9 && can_reduce {
                ActionTaken::DoseReduced
            } else {
                ActionTaken::DrugWithdrawn
            };
            let d = day as usize;
            match action {
                ActionTaken::DoseReduced => {
                    level += 1;
                    dose[d..].iter_mut().for_each(|x| *x = DOSE_LEVELS[level]);
                }
                ActionTaken::DoseInterrupted => {
                    dose[d..d + pause as usize].iter_mut().for_each(|x| *x = 0.0);
                }
                _ => dose[d..].iter_mut().for_each(|x| *x = 0.0),
            }
            ae.action_taken = action;
            last_action = Some(ae.start_day);
            if action == ActionTaken::DrugWithdrawn {
                break;
            }
        }
        dose
    }

    /// Runs of constant dose, split at cycle starts.
    fn exposures(&self, dose: &[f64]) -> Vec<ExposureRecord> {
        let mut runs: Vec<(f64, i32, i32)> = Vec::new();
        for (day, &mg) in dose.iter().enumerate().skip(1) {
            let day = day as i32;
            if mg == 0.0 {
                continue;
            }
            let cycle_start = (day - 1) % CYCLE_DAYS == 0;
            match runs.last_mut() {
                Some(run) if run.0 == mg && run.2 == day - 1 && !cycle_start => run.2 = day,
                _ => runs.push((mg, day, day)),
            }
        }
        runs.into_iter()
            .enumerate()
            .map(|(i, (mg, start, end))| ExposureRecord {
                ex_id: self.id("EX", i),
                patient_id: self.pid.clone(),
                dose_mg: mg,
                start_day: start,
                end_day: end,
            })
            .collect()
    }

    fn ae_conmeds(&mut self, aes: &[AdverseEvent], conmeds: &mut Vec<DraftConmed>) {
        for (k, ae) in aes.iter().enumerate() {
            let options = self.treatments_for(&ae.term);
            if options.is_empty() || !self.rng.gen_bool(0.75) {
                continue;
            }
            let drug = options.sample(self.rng).expect("non-empty").to_string();
            let start = ae.start_day + self.rng.gen_range(0..=2);
            let end = match ae.end_day {
                None if self.rng.gen_bool(0.5) => None,
                _ => Some(start + self.rng.gen_range(2..=10)),
            };
            let forms: Vec<&String> = self
                .kb
                .synonyms()
                .surface_forms(&ae.term)
                .map(|f| f.iter().collect())
                .unwrap_or_default();
            let indication_text = match forms.choose(self.rng) {
                Some(form) if self.rng.gen_bool(0.4) => form.to_string(),
                _ => ae.term.clone(),
            };
            conmeds.push(DraftConmed {
                drug,
                indication_text,
                linked: Some(k),
                start,
                end,
            });
        }
    }

    fn labs_and_vitals(
        &mut self,
        aes: &[AdverseEvent],
        enrollment_day: i32,
        cycles: i32,
        t_end: i32,
    ) -> (Vec<LabResult>, Vec<VitalSign>) {
        let graded: Vec<(&AdverseEvent, &GradingRule)> = aes
            .iter()
            .filter_map(|ae| self.kb.grading_rule(&ae.term).map(|r| (ae, r)))
            .collect();
        let mut labs: Vec<(i32, Analyte, f64)> = Vec::new();
        for day in [enrollment_day, MID_PANEL_DAY] {
            for analyte in PANEL {
                let active = graded.iter().find(|(ae, rule)| {
                    rule.analyte == analyte && ae.start_day <= day && day <= ae.end_day.unwrap_or(t_end)
                });
                let value = match active {
                    Some((ae, rule)) => self.in_band(rule, ae.grade),
                    None => self.normal_value(analyte),
                };
                labs.push((day, analyte, value));
            }
        }
        for (ae, rule) in &graded {
            let value = self.in_band(rule, ae.grade);
            labs.push((ae.start_day, rule.analyte, value));
        }

        let baseline = round_to(self.rng.gen_range(50.0..100.0), 1);
        let mut vitals: Vec<(i32, f64)> = std::iter::once(enrollment_day)
            .chain((0..cycles).map(|c| c * CYCLE_DAYS + 1))
            .map(|day| (day, round_to(baseline + self.rng.gen_range(-0.5..0.5), 1)))
            .collect();
        for ae in aes.iter().filter(|a| a.term == "edema" && a.grade >= 2) {
            let day = ae.start_day + 1;
            vitals.push((day, round_to(baseline + self.rng.gen_range(2.5..3.5), 1)));
            labs.push((day, Analyte::Bnp, self.rng.gen_range(150..=600) as f64));
        }

        labs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        vitals.sort_by_key(|v| v.0);
        let labs = labs
            .into_iter()
            .enumerate()
            .map(|(i, (day, analyte, value))| {
                let range = self.kb.normal_range(analyte);
                LabResult {
                    lab_id: self.id("LB", i),
                    patient_id: self.pid.clone(),
                    analyte,
                    value,
                    units: analyte.units().to_string(),
                    collection_day: day,
                    normal_low: range.low,
                    normal_high: range.high,
                }
            })
            .collect();
        let vitals = vitals
            .into_iter()
            .enumerate()
            .map(|(i, (day, weight))| VitalSign {
                vs_id: self.id("VS", i),
                patient_id: self.pid.clone(),
                day,
                weight_kg: weight,
                systolic_bp: self.rng.gen_range(105..=140),
                diastolic_bp: self.rng.gen_range(65..=90),
            })
            .collect();
        (labs, vitals)
    }

    fn procedures(&mut self, t_end: i32) -> Vec<Procedure> {
        let k = self.rng.gen_range(0..=2);
        let mut drafts: Vec<(i32, String)> = (0..k)
            .map(|_| {
                let name = self.lib.procedures.sample(self.rng).expect("validated").to_string();
                (self.rng.gen_range(1..=t_end), name)
            })
            .collect();
        drafts.sort();
        drafts
            .into_iter()
            .enumerate()
            .map(|(i, (day, name))| Procedure {
                pr_id: self.id("PR", i),
                patient_id: self.pid.clone(),
                name,
                day,
            })
            .collect()
    }

    /// A reportable value that grades exactly `grade` under `rule`.
    fn in_band(&mut self, rule: &GradingRule, grade: u8) -> f64 {
        let (lo, hi) = rule.band(grade).expect("generated grades have bands");
        let decimals = rule.analyte.decimals();
        let margin = (hi - lo) * 0.1;
        for _ in 0..32 {
            let v = round_to(self.rng.gen_range(lo + margin..hi - margin), decimals);
            if rule.grade(v) == Some(grade) {
                return v;
            }
        }
        round_to((lo + hi) / 2.0, decimals)
    }

    fn normal_value(&mut self, analyte: Analyte) -> f64 {
        let range = self.kb.normal_range(analyte);
        let margin = (range.high - range.low) * 0.15;
        round_to(self.rng.gen_range(range.low + margin..range.high - margin), analyte.decimals())
    }
}

pub(crate) fn round_to(v: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (v * f).round() / f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::check_coherence;

    fn corpus(n: usize, seed: u64) -> StudyDataset {
        generate_patients(&ElementLibrary::builtin(), &KnowledgeBase::builtin(), n, seed)
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(corpus(20, 7), corpus(20, 7));
        assert_ne!(corpus(20, 7), corpus(20, 8));
    }

    #[test]
    fn generated_corpus_is_valid_and_coherent() {
        let kb = KnowledgeBase::builtin();
        for seed in [1, 2, 42] {
            let ds = corpus(50, seed);
            assert_eq!(ds.patients.len(), 50);
            ds.validate().unwrap();
            let issues = check_coherence(&ds, &kb);
            assert!(issues.is_empty(), "seed {seed}: {issues:?}");
            assert_eq!(ds.provenance.len(), ds.record_count());
        }
    }

    #[test]
    fn patient_prefix_is_stable_when_n_grows() {
        let small = corpus(5, 9);
        let large = corpus(12, 9);
        let first: Vec<_> = large.adverse_events.iter().filter(|a| a.patient_id.as_str() <= "P0005").cloned().collect();
        assert_eq!(small.adverse_events, first);
    }

    #[test]
    fn dose_actions_show_in_exposure() {
        let ds = corpus(50, 42);
        let actioned = ds.adverse_events.iter().filter(|a| a.action_taken != ActionTaken::None).count();
        assert!(actioned > 0);
        let reductions = ds
            .by_patient()
            .iter()
            .flat_map(|p| p.dose_events())
            .filter(|e| e.kind == crate::data::DoseEventKind::Reduction)
            .count();
        assert!(reductions > 0);
    }

    #[test]
    fn rounding_keeps_band() {
        assert_eq!(round_to(7.46, 1), 7.5);
        assert_eq!(round_to(1.005, 0), 1.0);
    }
}
