//! Synthetic trial corpora.
//!
//! Patients are assembled from weighted element libraries, made clinically
//! coherent (labs match graded events, conmeds fall inside the events they
//! treat, dose records follow documented actions), and then corrupted with a
//! stratified set of discrepancies whose ground truth is kept for scoring.

mod coherence;
mod generate;
mod inject;
mod library;
mod overlay;

pub use coherence::{check_coherence, CoherenceIssue};
pub use generate::generate_patients;
pub use inject::{
    eligible_points, inject_discrepancies, revert, Annotation, InjectionPlan, InjectionResult, Transform, TruthFile,
};
pub use library::{build_libraries, ElementLibrary, LibraryDomain, WeightedSet};
pub use overlay::{apply_overlay, load_overlay, Overlay};

use thiserror::Error;

/// Tolerance windows, in study days, that define a coherent record set.
pub mod windows {
    /// Conmed may start this many days before its AE or after it ends.
    pub const CONMED_TIMING: i32 = 3;
    /// Labs this close to AE onset determine its lab grade.
    pub const SEVERITY_LAB: i32 = 7;
    /// A documented dose action must show in exposure within this many days.
    pub const DOSE_ACTION: i32 = 7;
    /// A lab-gradeable AE needs an abnormal lab this close to onset.
    pub const SUPPORTING_LAB: i32 = 14;
    /// Toxicity onset this soon after an exposure start is plausibly related.
    pub const CAUSALITY: i32 = 14;
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("element library domain {0} is empty")]
    EmptyDomain(LibraryDomain),
    #[error("element library: {0}")]
    Library(String),
    #[error("injection rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("category weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("clean dataset is not coherent: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Incoherent(Vec<CoherenceIssue>),
    #[error("category {category}: only {placed} of {quota} discrepancies could be placed")]
    InsufficientCandidates { category: u8, placed: usize, quota: usize },
    #[error("overlay: {0}")]
    Overlay(String),
    #[error("revert: {0}")]
    Revert(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}
