use std::collections::BTreeMap;

use crfcheck_core::data::{export_dataset, import_dataset, Domain, DOMAINS};
use crfcheck_core::knowledge::KnowledgeBase;
use crfcheck_core::synthgen::{generate_patients, ElementLibrary};
use serde_json::Value;

fn dictionary() -> Value {
    serde_json::from_str(include_str!("../data/data_dictionary.json")).unwrap()
}

fn columns(dict: &Value, domain: Domain) -> Vec<String> {
    dict["domains"][domain.name()]["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn dictionary_lists_every_domain_once() {
    let dict = dictionary();
    let listed: Vec<&String> = dict["domains"].as_object().unwrap().keys().collect();
    assert_eq!(listed.len(), DOMAINS.len());
    for d in DOMAINS {
        assert_eq!(dict["domains"][d.name()]["file"], d.csv_name());
        assert_eq!(columns(&dict, d), d.columns());
    }
}

#[test]
fn exported_headers_follow_dictionary() {
    let dict = dictionary();
    let kb = KnowledgeBase::builtin();
    let ds = generate_patients(&ElementLibrary::builtin(), &kb, 5, 3);
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    for d in DOMAINS {
        let mut rdr = csv::Reader::from_path(dir.path().join(d.csv_name())).unwrap();
        let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
        assert_eq!(header, columns(&dict, d), "{}", d.name());
    }
    assert!(import_dataset(dir.path()).unwrap().same_records(&ds));
}

#[test]
fn non_nullable_columns_are_filled() {
    let dict = dictionary();
    let kb = KnowledgeBase::builtin();
    let ds = generate_patients(&ElementLibrary::builtin(), &kb, 10, 9);
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    for d in DOMAINS {
        let spec: BTreeMap<String, bool> = dict["domains"][d.name()]["columns"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| (c["name"].as_str().unwrap().to_string(), c["nullable"].as_bool().unwrap()))
            .collect();
        let mut rdr = csv::Reader::from_path(dir.path().join(d.csv_name())).unwrap();
        let header = rdr.headers().unwrap().clone();
        for row in rdr.records() {
            let row = row.unwrap();
            for (name, cell) in header.iter().zip(row.iter()) {
                // narrative and free text may legitimately be blank strings
                if cell.is_empty() && !spec[name] {
                    let ty = dict["domains"][d.name()]["columns"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .find(|c| c["name"] == name)
                        .unwrap()["type"]
                        .clone();
                    assert_eq!(ty, "string", "{}.{name} empty", d.name());
                }
            }
        }
    }
}
