//! Curated clinical knowledge: drug indications, study-drug toxicities,
//! lab-based severity grading, expected progressions and term synonyms.
//!
//! The knowledge base is a versioned JSON document (see
//! `data/knowledge_base.json` and `docs/knowledge_base.md`). It is immutable
//! once loaded.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Analyte;

const BUILTIN_KB: &str = include_str!("../../data/knowledge_base.json");

#[derive(Debug, Error)]
pub enum KbError {
    #[error("knowledge base parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read knowledge base {path}: {message}")]
    Io { path: String, message: String },
    #[error("duplicate drug after normalization: {0}")]
    DuplicateDrug(String),
    #[error("duplicate grading rule for term {0}")]
    DuplicateRule(String),
    #[error("grading rule for {term}: thresholds must be strictly monotone in the {direction:?} direction")]
    NonMonotone { term: String, direction: Direction },
    #[error("grading rule for {0}: expected 4 thresholds (grades 1-4)")]
    ThresholdCount(String),
    #[error("surface form '{form}' maps to both '{first}' and '{second}'")]
    AmbiguousSynonym { form: String, first: String, second: String },
    #[error("expected progression for {0}: window_days must be positive")]
    BadWindow(Analyte),
    #[error("missing normal range for {0}")]
    MissingRange(Analyte),
    #[error("normal range for {0}: low must be below high")]
    BadRange(Analyte),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugMonograph {
    pub drug_name: String,
    #[serde(default)]
    pub indications: BTreeSet<String>,
    #[serde(default)]
    pub is_hepatotoxic: bool,
    #[serde(default)]
    pub treats_nothing: bool,
    #[serde(default)]
    pub drug_class: Option<String>,
    #[serde(default)]
    pub default_dose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingRule {
    pub ae_term: String,
    pub analyte: Analyte,
    pub direction: Direction,
    /// Grade boundaries for grades 1 through 4.
    pub thresholds: Vec<f64>,
}

impl GradingRule {
    /// Grade implied by `value`, or `None` when the value is not beyond the
    /// grade-1 boundary.
    pub fn grade(&self, value: f64) -> Option<u8> {
        let crossed = self
            .thresholds
            .iter()
            .take_while(|&&t| match self.direction {
                Direction::Below => value < t,
                Direction::Above => value > t,
            })
            .count();
        (crossed > 0).then_some(crossed as u8)
    }

    /// Value interval for `grade` as `(lower, upper)`. For `Below` rules the
    /// interval is `[lower, upper)`, for `Above` rules `(lower, upper]`.
    pub fn band(&self, grade: u8) -> Option<(f64, f64)> {
        let g = grade as usize;
        if !(1..=self.thresholds.len()).contains(&g) {
            return None;
        }
        let edge = self.thresholds[g - 1];
        Some(match self.direction {
            Direction::Below => (self.thresholds.get(g).copied().unwrap_or(0.0), edge),
            Direction::Above => (
                edge,
                self.thresholds
                    .get(g)
                    .copied()
                    .unwrap_or(edge * 2.0),
            ),
        })
    }

    fn is_monotone(&self) -> bool {
        self.thresholds.windows(2).all(|w| match self.direction {
            Direction::Below => w[1] < w[0],
            Direction::Above => w[1] > w[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgressionTrigger {
    /// Any study-drug exposure start.
    StudyDrug,
    /// Start of a concomitant medication of the given class.
    MedicationClass { class: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedProgression {
    pub trigger: ProgressionTrigger,
    pub analyte: Analyte,
    pub direction: Direction,
    pub window_days: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalRange {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityCue {
    pub keyword: String,
    pub min_grade: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDrugProfile {
    pub name: String,
    pub toxicities: BTreeSet<String>,
}

/// Case-insensitive surface form → canonical term mapping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable {
    canonical: BTreeMap<String, BTreeSet<String>>,
    lookup: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn new(entries: &BTreeMap<String, Vec<String>>) -> Result<Self, KbError> {
        let mut table = SynonymTable::default();
        for (canonical, forms) in entries {
            let canon = normalize_text(canonical);
            let set = table.canonical.entry(canon.clone()).or_default();
            for form in std::iter::once(canonical).chain(forms) {
                let key = normalize_text(form);
                set.insert(key.clone());
                if let Some(prev) = table.lookup.insert(key.clone(), canon.clone()) {
                    if prev != canon {
                        return Err(KbError::AmbiguousSynonym {
                            form: key,
                            first: prev,
                            second: canon,
                        });
                    }
                }
            }
        }
        Ok(table)
    }

    pub fn lookup(&self, text: &str) -> Option<&str> {
        self.lookup.get(&normalize_text(text)).map(String::as_str)
    }

    pub fn surface_forms(&self, canonical: &str) -> Option<&BTreeSet<String>> {
        self.canonical.get(canonical)
    }
}

/// Lower-cases, turns punctuation other than hyphens into spaces and
/// collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indication {
    Indicated,
    NotIndicated,
    UnknownDrug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "grade", rename_all = "snake_case")]
pub enum LabGrading {
    Grade(u8),
    /// A rule exists but the value is within normal limits for it.
    WithinNormal,
    /// No grading rule covers the term.
    NoRule,
}

#[derive(Debug, Deserialize)]
struct KbFile {
    version: String,
    study_drug: StudyDrugProfile,
    normal_ranges: BTreeMap<Analyte, NormalRange>,
    grading_rules: Vec<GradingRule>,
    expected_progressions: Vec<ExpectedProgression>,
    severity_cues: Vec<SeverityCue>,
    drugs: Vec<DrugMonograph>,
    synonyms: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub version: String,
    pub study_drug: StudyDrugProfile,
    drugs: BTreeMap<String, DrugMonograph>,
    grading_rules: BTreeMap<String, GradingRule>,
    progressions: Vec<ExpectedProgression>,
    severity_cues: Vec<(Vec<String>, u8, String)>,
    normal_ranges: BTreeMap<Analyte, NormalRange>,
    synonyms: SynonymTable,
}

impl KnowledgeBase {
    /// The knowledge base shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_KB).expect("bundled knowledge base is valid")
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        let text = std::fs::read_to_string(path).map_err(|e| KbError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let file: KbFile = serde_json::from_str(text)?;
        let synonyms = SynonymTable::new(&file.synonyms)?;

        let mut drugs = BTreeMap::new();
        for mut drug in file.drugs {
            let key = normalize_text(&drug.drug_name);
            drug.indications = drug.indications.iter().map(|t| canonical_or_raw(&synonyms, t)).collect();
            drug.drug_name = key.clone();
            if drugs.insert(key.clone(), drug).is_some() {
                return Err(KbError::DuplicateDrug(key));
            }
        }

        let mut grading_rules = BTreeMap::new();
        for mut rule in file.grading_rules {
            rule.ae_term = canonical_or_raw(&synonyms, &rule.ae_term);
            if rule.thresholds.len() != 4 {
                return Err(KbError::ThresholdCount(rule.ae_term));
            }
            if !rule.is_monotone() {
                return Err(KbError::NonMonotone {
                    term: rule.ae_term,
                    direction: rule.direction,
                });
            }
            let term = rule.ae_term.clone();
            if grading_rules.insert(term.clone(), rule).is_some() {
                return Err(KbError::DuplicateRule(term));
            }
        }

        for p in &file.expected_progressions {
            if p.window_days <= 0 {
                return Err(KbError::BadWindow(p.analyte));
            }
        }
        for analyte in Analyte::ALL {
            match file.normal_ranges.get(&analyte) {
                None => return Err(KbError::MissingRange(analyte)),
                Some(r) if r.low >= r.high => return Err(KbError::BadRange(analyte)),
                _ => {}
            }
        }

        let mut study_drug = file.study_drug;
        study_drug.toxicities = study_drug
            .toxicities
            .iter()
            .map(|t| canonical_or_raw(&synonyms, t))
            .collect();

        let severity_cues = file
            .severity_cues
            .into_iter()
            .map(|c| {
                let tokens = tokenize(&c.keyword);
                (tokens, c.min_grade, c.keyword)
            })
            .collect();

        Ok(KnowledgeBase {
            version: file.version,
            study_drug,
            drugs,
            grading_rules,
            progressions: file.expected_progressions,
            severity_cues,
            normal_ranges: file.normal_ranges,
            synonyms,
        })
    }

    /// Canonical term for `text`, or `None` when the term is unknown.
    pub fn normalize_term(&self, text: &str) -> Option<String> {
        self.synonyms.lookup(text).map(str::to_string)
    }

    /// Canonical term when known, otherwise the normalized text.
    pub fn canonical(&self, text: &str) -> String {
        canonical_or_raw(&self.synonyms, text)
    }

    pub fn synonyms(&self) -> &SynonymTable {
        &self.synonyms
    }

    pub fn drug(&self, drug_name: &str) -> Option<&DrugMonograph> {
        self.drugs.get(&normalize_text(drug_name))
    }

    pub fn drugs(&self) -> impl Iterator<Item = &DrugMonograph> {
        self.drugs.values()
    }

    pub fn indicated_for(&self, drug_name: &str, term: &str) -> Indication {
        match self.drug(drug_name) {
            None => Indication::UnknownDrug,
            Some(drug) if drug.indications.contains(&self.canonical(term)) => Indication::Indicated,
            Some(_) => Indication::NotIndicated,
        }
    }

    pub fn is_hepatotoxic(&self, drug_name: &str) -> bool {
        self.drug(drug_name).is_some_and(|d| d.is_hepatotoxic)
    }

    pub fn grading_rule(&self, term: &str) -> Option<&GradingRule> {
        self.grading_rules.get(&self.canonical(term))
    }

    pub fn grading_rules(&self) -> impl Iterator<Item = &GradingRule> {
        self.grading_rules.values()
    }

    /// AE term whose grading rule tracks `analyte` moving in `direction`.
    pub fn term_for_change(&self, analyte: Analyte, direction: Direction) -> Option<&str> {
        self.grading_rules
            .values()
            .find(|r| r.analyte == analyte && r.direction == direction)
            .map(|r| r.ae_term.as_str())
    }

    pub fn grade_from_lab(&self, term: &str, value: f64) -> LabGrading {
        match self.grading_rule(term) {
            None => LabGrading::NoRule,
            Some(rule) => match rule.grade(value) {
                Some(g) => LabGrading::Grade(g),
                None => LabGrading::WithinNormal,
            },
        }
    }

    pub fn is_study_drug_toxicity(&self, term: &str) -> bool {
        self.study_drug.toxicities.contains(&self.canonical(term))
    }

    pub fn expected_progressions(&self) -> &[ExpectedProgression] {
        &self.progressions
    }

    pub fn normal_range(&self, analyte: Analyte) -> NormalRange {
        self.normal_ranges[&analyte]
    }

    /// Highest minimum grade implied by severity keywords in `narrative`,
    /// with the keyword that produced it.
    pub fn narrative_min_grade(&self, narrative: &str) -> Option<(u8, &str)> {
        let tokens = tokenize(narrative);
        self.severity_cues
            .iter()
            .filter(|(cue, _, _)| !cue.is_empty() && tokens.windows(cue.len()).any(|w| w == cue.as_slice()))
            .map(|(_, grade, keyword)| (*grade, keyword.as_str()))
            .max_by_key(|(grade, _)| *grade)
    }
}

fn canonical_or_raw(synonyms: &SynonymTable, text: &str) -> String {
    synonyms
        .lookup(text)
        .map(str::to_string)
        .unwrap_or_else(|| normalize_text(text))
}

fn tokenize(text: &str) -> Vec<String> {
    normalize_text(text).split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect()
}
