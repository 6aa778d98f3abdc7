//! Query text templates with `{{name}}` placeholders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::QueryError;
use crate::category::Category;
use crate::detector::Finding;

const BUILTIN: [(&str, &str); 7] = [
    ("category_1", include_str!("../../data/templates/category_1.txt")),
    ("category_2", include_str!("../../data/templates/category_2.txt")),
    ("category_3", include_str!("../../data/templates/category_3.txt")),
    ("category_4", include_str!("../../data/templates/category_4.txt")),
    ("category_5", include_str!("../../data/templates/category_5.txt")),
    ("category_6", include_str!("../../data/templates/category_6.txt")),
    ("unverifiable", include_str!("../../data/templates/unverifiable.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

fn key(category: Option<Category>) -> String {
    match category {
        Some(c) => format!("category_{}", c.number()),
        None => "unverifiable".into(),
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim().to_string()))
                .collect(),
        }
    }

    /// Loads `category_N.txt` and `unverifiable.txt` from `dir`. Every file
    /// must be present.
    pub fn load(dir: &Path) -> Result<Self, QueryError> {
        let mut templates = BTreeMap::new();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path)
                .map_err(|e| QueryError::Template(format!("{}: {e}", path.display())))?;
            templates.insert(name.to_string(), text.trim().to_string());
        }
        Ok(TemplateSet { templates })
    }

    pub fn get(&self, category: Option<Category>) -> &str {
        &self.templates[&key(category)]
    }

    /// Fills the category template from the finding. Every placeholder must
    /// resolve and every evidence record id appears in the result.
    pub fn render(&self, finding: &Finding) -> Result<String, QueryError> {
        let mut vars: BTreeMap<&str, String> = finding
            .facts
            .iter()
            .map(|(k, v)| (k.as_str(), display(v)))
            .collect();
        vars.insert("patient_id", finding.patient_id.clone());
        vars.insert("finding_id", finding.finding_id.clone());
        vars.insert("record_ids", finding.record_ids.join(", "));
        vars.insert("rationale", finding.rationale.clone());
        let text = fill(self.get(finding.category), &vars)?;
        let missing: Vec<&str> = finding
            .record_ids
            .iter()
            .filter(|id| !text.contains(id.as_str()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(QueryError::Template(format!("text does not cite {}", missing.join(", "))));
        }
        Ok(text)
    }
}

fn display(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "not recorded".into(),
        other => other.to_string(),
    }
}

fn fill(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, QueryError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or_else(|| QueryError::Template("unclosed placeholder".into()))?;
        let name = after[..close].trim();
        let value = vars
            .get(name)
            .ok_or_else(|| QueryError::Template(format!("no value for placeholder '{name}'")))?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
