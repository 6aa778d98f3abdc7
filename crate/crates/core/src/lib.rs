//! Clinical trial data-quality engine.
//!
//! Modules follow the review pipeline: [`data`] holds the harmonized CRF
//! model, [`knowledge`] the curated clinical rules, [`synthgen`] builds
//! annotated synthetic corpora, [`context`] places records on patient
//! timelines, [`detector`] finds discrepancies, [`query`] drives the reviewer
//! workflow, [`evalstats`] scores detectors and reviewers, and [`econ`] holds
//! the trial cost model.

mod category;
pub mod context;
pub mod data;
pub mod detector;
pub mod econ;
pub mod evalstats;
pub mod knowledge;
pub mod query;
pub mod synthgen;

pub use category::Category;

#[cfg(test)]
mod testutil;
