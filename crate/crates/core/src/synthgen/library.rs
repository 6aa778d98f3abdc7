use std::collections::BTreeMap;
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::data::StudyDataset;

const DEFAULT_LIBRARY: &str = include_str!("../../data/element_library.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LibraryDomain {
    AdverseEvents,
    ConcomitantMedications,
    Procedures,
    MedicalHistory,
}

impl LibraryDomain {
    pub const ALL: [LibraryDomain; 4] = [
        LibraryDomain::AdverseEvents,
        LibraryDomain::ConcomitantMedications,
        LibraryDomain::Procedures,
        LibraryDomain::MedicalHistory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LibraryDomain::AdverseEvents => "adverse_events",
            LibraryDomain::ConcomitantMedications => "concomitant_medications",
            LibraryDomain::Procedures => "procedures",
            LibraryDomain::MedicalHistory => "medical_history",
        }
    }
}

impl fmt::Display for LibraryDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Elements of one domain with their occurrence weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightedSet(pub BTreeMap<String, f64>);

impl WeightedSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weight(&self, element: &str) -> Option<f64> {
        self.0.get(element).copied()
    }

    pub fn total_weight(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, &w)| (k.as_str(), w))
    }

    /// Draws one element with probability proportional to its weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&str> {
        let items: Vec<(&String, &f64)> = self.0.iter().collect();
        let dist = WeightedIndex::new(items.iter().map(|(_, &w)| w)).ok()?;
        Some(items[dist.sample(rng)].0.as_str())
    }

    /// Draws up to `k` distinct elements, weighted, without replacement.
    pub fn sample_distinct<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<&str> {
        let items: Vec<(&String, &f64)> = self.0.iter().collect();
        match items.choose_multiple_weighted(rng, k.min(items.len()), |(_, &w)| w) {
            Ok(chosen) => chosen.map(|(name, _)| name.as_str()).collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Subset of elements accepted by `keep`, weights unchanged.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> WeightedSet {
        WeightedSet(
            self.0
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, &w)| (k.clone(), w))
                .collect(),
        )
    }
}

/// Sampling libraries for the four element domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementLibrary {
    pub adverse_events: WeightedSet,
    pub concomitant_medications: WeightedSet,
    pub procedures: WeightedSet,
    pub medical_history: WeightedSet,
}

impl ElementLibrary {
    /// The seed library shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_LIBRARY).expect("bundled element library is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let lib: ElementLibrary =
            serde_json::from_str(text).map_err(|e| SynthError::Library(e.to_string()))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn domain(&self, domain: LibraryDomain) -> &WeightedSet {
        match domain {
            LibraryDomain::AdverseEvents => &self.adverse_events,
            LibraryDomain::ConcomitantMedications => &self.concomitant_medications,
            LibraryDomain::Procedures => &self.procedures,
            LibraryDomain::MedicalHistory => &self.medical_history,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for domain in LibraryDomain::ALL {
            let set = self.domain(domain);
            if set.is_empty() {
                return Err(SynthError::EmptyDomain(domain));
            }
            if let Some((element, w)) = set.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
                return Err(SynthError::Library(format!(
                    "{domain}: weight for '{element}' must be positive, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Counts every distinct element of the four library domains in `source`.
pub fn build_libraries(source: &StudyDataset) -> Result<ElementLibrary, SynthError> {
    fn count<'a>(items: impl Iterator<Item = &'a str>) -> WeightedSet {
        let mut counts = BTreeMap::new();
        for item in items {
            *counts.entry(item.to_string()).or_insert(0.0) += 1.0;
        }
        WeightedSet(counts)
    }
    let lib = ElementLibrary {
        adverse_events: count(source.adverse_events.iter().map(|r| r.term.as_str())),
        concomitant_medications: count(source.conmeds.iter().map(|r| r.drug_name.as_str())),
        procedures: count(source.procedures.iter().map(|r| r.name.as_str())),
        medical_history: count(source.medical_history.iter().map(|r| r.condition.as_str())),
    };
    for domain in LibraryDomain::ALL {
        if lib.domain(domain).is_empty() {
            return Err(SynthError::EmptyDomain(domain));
        }
    }
    Ok(lib)
}
