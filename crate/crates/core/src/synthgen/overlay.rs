//! Hand edits layered over a generated corpus.
//!
//! An overlay is a JSON object keyed by record id; each value is an object
//! of field replacements, e.g. `{"P0003-AE02": {"grade": 2}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::SynthError;
use crate::data::StudyDataset;

pub type Overlay = BTreeMap<String, Map<String, Value>>;

pub fn load_overlay(path: &Path) -> Result<Overlay, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|e| SynthError::Overlay(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Overlay(e.to_string()))
}

/// Applies every patch, then re-validates the dataset.
pub fn apply_overlay(ds: &mut StudyDataset, overlay: &Overlay) -> Result<(), SynthError> {
    for (id, patch) in overlay {
        let mut applied = false;
        macro_rules! try_domain {
            ($field:ident, $key:ident) => {
                if !applied {
                    if let Some(rec) = ds.$field.iter_mut().find(|r| r.$key == *id) {
                        *rec = patched(rec, patch, id)?;
                        applied = true;
                    }
                }
            };
        }
        try_domain!(patients, patient_id);
        try_domain!(adverse_events, ae_id);
        try_domain!(conmeds, cm_id);
        try_domain!(labs, lab_id);
        try_domain!(vitals, vs_id);
        try_domain!(exposures, ex_id);
        try_domain!(medical_history, mh_id);
        try_domain!(procedures, pr_id);
        if !applied {
            return Err(SynthError::Overlay(format!("unknown record id {id}")));
        }
    }
    ds.validate()?;
    Ok(())
}

fn patched<T: Serialize + DeserializeOwned>(rec: &T, patch: &Map<String, Value>, id: &str) -> Result<T, SynthError> {
    let mut value = serde_json::to_value(rec).expect("records serialize");
    let obj = value.as_object_mut().expect("records are objects");
    for (field, v) in patch {
        if !obj.contains_key(field) {
            return Err(SynthError::Overlay(format!("{id}: unknown field {field}")));
        }
        obj.insert(field.clone(), v.clone());
    }
    serde_json::from_value(value).map_err(|e| SynthError::Overlay(format!("{id}: {e}")))
}
