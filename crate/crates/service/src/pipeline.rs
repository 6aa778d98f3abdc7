//! The batch commands: generate, inject, detect, evaluate, econ, context.
//!
//! Each writes its artifacts and returns a summary that the CLI prints.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context as _, Result};
use crfcheck_core::context::dump_ndjson;
use crfcheck_core::data::{export_dataset, import_dataset};
use crfcheck_core::detector::{detect_all, findings_from_ndjson, Assistant, DetectorConfig};
use crfcheck_core::econ::{report_to_csv, sensitivity_sweep, sweep_to_csv, total_report, EconParams, EconReport, SweepRow};
use crfcheck_core::evalstats::{evaluate_detection, DetectionEval};
use crfcheck_core::knowledge::KnowledgeBase;
use crfcheck_core::synthgen::{
    apply_overlay, eligible_points, generate_patients, inject_discrepancies, load_overlay, ElementLibrary,
    InjectionPlan, TruthFile,
};
use rust_decimal::Decimal;
use serde::Serialize;

use crate::assistant::HttpAssistant;
use crate::config::AssistantEndpoint;

pub fn load_kb(path: Option<&Path>) -> Result<KnowledgeBase> {
    match path {
        Some(p) => KnowledgeBase::load(p).map_err(|e| anyhow!("knowledge base {}: {e}", p.display())),
        None => Ok(KnowledgeBase::builtin()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub out: PathBuf,
    pub patients: usize,
    pub records: usize,
    pub eligible_points: usize,
}

pub struct GenerateArgs<'a> {
    pub out: &'a Path,
    pub patients: usize,
    pub seed: u64,
    pub library: Option<&'a Path>,
    pub overlay: Option<&'a Path>,
}

pub fn generate(args: &GenerateArgs<'_>, kb: &KnowledgeBase) -> Result<GenerateSummary> {
    if args.patients == 0 {
        bail!("patient count must be positive");
    }
    let library = match args.library {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ElementLibrary::from_json(&text)?
        }
        None => ElementLibrary::builtin(),
    };
    let mut ds = generate_patients(&library, kb, args.patients, args.seed);
    if let Some(p) = args.overlay {
        apply_overlay(&mut ds, &load_overlay(p)?)?;
    }
    export_dataset(&ds, args.out)?;
    Ok(GenerateSummary {
        out: args.out.to_path_buf(),
        patients: ds.patients.len(),
        records: ds.record_count(),
        eligible_points: eligible_points(&ds),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InjectSummary {
    pub out: PathBuf,
    pub truth: PathBuf,
    pub eligible_points: usize,
    pub annotations: usize,
    pub per_category: [usize; 6],
    pub warnings: Vec<String>,
}

pub fn inject(input: &Path, out: &Path, truth: &Path, plan: &InjectionPlan, kb: &KnowledgeBase) -> Result<InjectSummary> {
    let clean = import_dataset(input)?;
    let result = inject_discrepancies(&clean, kb, plan)?;
    export_dataset(&result.corrupted, out)?;
    write(truth, &(serde_json::to_string_pretty(&result.truth)? + "\n"))?;
    Ok(InjectSummary {
        out: out.to_path_buf(),
        truth: truth.to_path_buf(),
        eligible_points: result.truth.eligible_points,
        annotations: result.truth.annotations.len(),
        per_category: result.truth.category_counts(),
        warnings: result.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectSummary {
    pub out: PathBuf,
    pub findings: usize,
    pub category_findings: usize,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assistant: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub assistant_errors: Vec<String>,
}

pub fn detect(
    input: &Path,
    out: &Path,
    assistant: Option<&AssistantEndpoint>,
    kb: &KnowledgeBase,
) -> Result<DetectSummary> {
    let ds = import_dataset(input)?;
    let client = assistant.map(HttpAssistant::new);
    let report = detect_all(
        &ds,
        kb,
        &DetectorConfig::default(),
        client.as_ref().map(|c| c as &dyn Assistant),
    );
    write(out, &report.to_ndjson())?;
    Ok(DetectSummary {
        out: out.to_path_buf(),
        findings: report.findings.len(),
        category_findings: report.category_findings().count(),
        degraded: report.degraded,
        assistant: report.assistant,
        assistant_errors: report.assistant_errors,
    })
}

pub fn evaluate(findings: &Path, truth: &Path, report: &Path) -> Result<DetectionEval> {
    let text = fs::read_to_string(findings).with_context(|| format!("reading {}", findings.display()))?;
    let findings = findings_from_ndjson(&text).context("malformed findings file")?;
    let text = fs::read_to_string(truth).with_context(|| format!("reading {}", truth.display()))?;
    let truth: TruthFile = serde_json::from_str(&text).context("malformed truth file")?;
    let eval = evaluate_detection(&findings, &truth)?;
    write(report, &(serde_json::to_string_pretty(&eval)? + "\n"))?;
    Ok(eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutFormat {
    Json,
    Csv,
}

impl OutFormat {
    /// From the output file's extension; JSON unless it ends in `.csv`.
    pub fn for_path(path: Option<&Path>) -> OutFormat {
        match path.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => OutFormat::Csv,
            _ => OutFormat::Json,
        }
    }
}

/// `field=v1,v2,...` or `field=lo..hi` (integer steps, inclusive).
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<Decimal>)> {
    let (field, values) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("sweep must look like field=1,2,3 or field=5..12"))?;
    let parse = |s: &str| Decimal::from_str(s.trim()).map_err(|_| anyhow!("{s} is not a number"));
    let values = if values.trim().is_empty() {
        Vec::new()
    } else if let Some((lo, hi)) = values.split_once("..") {
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        let mut out = Vec::new();
        let mut v = lo;
        while v <= hi {
            out.push(v);
            v += Decimal::ONE;
        }
        out
    } else {
        values.split(',').map(parse).collect::<Result<_>>()?
    };
    Ok((field.trim().to_string(), values))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EconOutput {
    Report(EconReport),
    Sweep { field: String, rows: Vec<SweepRow> },
}

impl EconOutput {
    pub fn render(&self, format: OutFormat) -> Result<String> {
        Ok(match (self, format) {
            (_, OutFormat::Json) => serde_json::to_string_pretty(self)? + "\n",
            (EconOutput::Report(r), OutFormat::Csv) => report_to_csv(r)?,
            (EconOutput::Sweep { field, rows }, OutFormat::Csv) => sweep_to_csv(field, rows)?,
        })
    }
}

pub fn econ(params: Option<&Path>, sweep: Option<&str>) -> Result<EconOutput> {
    let p = match params {
        Some(path) => EconParams::load(path)?,
        None => EconParams::default(),
    };
    p.validate()?;
    match sweep {
        None => Ok(EconOutput::Report(total_report(&p)?)),
        Some(spec) => {
            let (field, values) = parse_sweep(spec)?;
            let rows = sensitivity_sweep(&p, &field, &values)?;
            Ok(EconOutput::Sweep { field, rows })
        }
    }
}

pub fn context(input: &Path, patient: &str, kb: &KnowledgeBase) -> Result<String> {
    let ds = import_dataset(input)?;
    Ok(dump_ndjson(&ds, kb, patient)?)
}
