//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Tolerances and time limits are pinned next to each check.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crfcheck::config::ServiceConfig;
use crfcheck::pipeline::{self, GenerateArgs};
use crfcheck::state::{AppState, Clock};
use crfcheck_core::data::{export_dataset, AuditLog};
use crfcheck_core::detector::{detect_all, DetectorConfig};
use crfcheck_core::econ::{total_report, EconParams};
use crfcheck_core::evalstats::{
    confusion_metrics, evaluate_detection, paired_cohens_d, paired_t_test, power_paired_t, required_n,
    ConfusionMatrix,
};
use crfcheck_core::knowledge::KnowledgeBase;
use crfcheck_core::query::{creation_entry, next_state, replay, transition, QueryAction, QueryState, ReviewQuery};
use crfcheck_core::synthgen::{
    eligible_points, generate_patients, inject_discrepancies, revert, ElementLibrary, InjectionPlan,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rust_decimal::prelude::ToPrimitive;
use serde_json::json;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn run(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let took = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if took > limit => Err(format!("{detail}; took {took:.2?}, limit {limit:?}")),
        other => other,
    };
    let pass = outcome.is_ok();
    let detail = outcome.unwrap_or_else(|e| e);
    println!("{} {name}: {detail} [{took:.2?}]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn num(d: rust_decimal::Decimal) -> f64 {
    d.to_f64().unwrap()
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn econ_golden() -> Outcome {
    let r = total_report(&EconParams::default()).map_err(|e| e.to_string())?;
    let (review, query, dbl) = (&r.lines[0], &r.lines[1], &r.lines[2]);
    ensure!(num(review.savings) == 420_000.0, "review savings {}", review.savings);
    ensure!(within(num(query.savings), 287_510.0, 30.0), "query savings {}", query.savings);
    ensure!(within(num(query.traditional), 651_949.0, 10.0), "query traditional {}", query.traditional);
    ensure!(num(dbl.savings) == 4_400_000.0, "lock savings {}", dbl.savings);
    ensure!(within(num(r.total.savings), 5_107_510.0, 50.0), "total {}", r.total.savings);
    ensure!(within(num(r.total.pct_reduction), 15.2, 0.1), "reduction {}%", r.total.pct_reduction);
    Ok(format!(
        "total savings {:.2}, reduction {:.2}%",
        num(r.total.savings),
        num(r.total.pct_reduction)
    ))
}

/// Two-sided t tail probability for integer df from the closed-form
/// trigonometric series, independent of the incomplete beta route.
fn reference_t_p(t: f64, df: u32) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let a = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 3;
            while k < df {
                term *= c * c * (k - 1) as f64 / k as f64;
                sum += term;
                k += 2;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 2;
        while k < df {
            term *= c * c * (k - 1) as f64 / k as f64;
            sum += term;
            k += 2;
        }
        s * sum
    };
    1.0 - a
}

fn statistics() -> Outcome {
    let n = required_n(1.0, 0.05, 0.80).map_err(|e| e.to_string())?;
    ensure!(n == 10, "required_n = {n}");
    // ten differences with mean 17.1 and sample sd 8.16
    let base = [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 0.0, 0.0];
    let ss: f64 = base.iter().map(|x: &f64| x * x).sum();
    let scale = 8.16 * (9.0 / ss).sqrt();
    let diffs: Vec<f64> = base.iter().map(|x| 17.1 + x * scale).collect();
    let d = paired_cohens_d(&diffs).map_err(|e| e.to_string())?;
    ensure!(within(d, 2.10, 0.005), "d = {d}");
    let power = power_paired_t(10, 2.10, 0.05).map_err(|e| e.to_string())?;
    ensure!(power > 0.999, "power = {power}");

    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(3..40);
        let shift = rng.gen_range(-3.0..3.0);
        let before: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
        let after: Vec<f64> = before.iter().map(|b| b + shift + rng.gen_range(-4.0..4.0)).collect();
        let got = paired_t_test(&before, &after).map_err(|e| e.to_string())?;
        let diffs: Vec<f64> = before.iter().zip(&after).map(|(b, a)| a - b).collect();
        let m = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        let t = m / (var / n as f64).sqrt();
        let p = reference_t_p(t, n as u32 - 1);
        worst = worst.max((got.t - t).abs() / t.abs().max(1.0)).max((got.p_two_sided - p).abs());
    }
    ensure!(worst <= 1e-9, "worst t-test deviation {worst:e}");
    Ok(format!("n=10, d={d:.4}, power={power:.5}, t-test max deviation {worst:.1e}"))
}

fn confusion_reconstruction() -> Outcome {
    let a = confusion_metrics(&ConfusionMatrix::new(29, 36, 5, 5)).map_err(|e| e.to_string())?;
    let b = confusion_metrics(&ConfusionMatrix::new(96, 7, 12, 109)).map_err(|e| e.to_string())?;
    let pct = |x: f64| 100.0 * x;
    let checks = [
        ("accuracy A", pct(a.accuracy), 45.3),
        ("accuracy B", pct(b.accuracy), 91.5),
        ("precision A", pct(a.precision.unwrap()), 44.6),
        ("precision B", pct(b.precision.unwrap()), 93.2),
        ("recall A", pct(a.recall.unwrap()), 85.2),
        ("recall B", pct(b.recall.unwrap()), 88.9),
        ("F1 A", pct(a.f1_score.unwrap()), 58.5),
        ("F1 B", pct(b.f1_score.unwrap()), 91.0),
    ];
    for (name, got, want) in checks {
        ensure!(within(got, want, 0.1 + 1e-9), "{name} {got:.3} vs {want}");
    }
    let err_ratio = (pct(a.error_rate) * 10.0).round() / (pct(b.error_rate) * 10.0).round();
    ensure!(within(err_ratio, 6.44, 0.02), "error ratio {err_ratio}");
    let fp_ratio = (36.0 / 75.0) / (7.0 / 224.0);
    ensure!((15.36 - 1e-9..=15.48 + 1e-9).contains(&fp_ratio), "fp ratio {fp_ratio}");
    Ok(format!("error ratio {err_ratio:.3}, fp-rate ratio {fp_ratio:.3}"))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn injection_contract() -> Outcome {
    let kb = KnowledgeBase::builtin();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clean = generate_patients(&ElementLibrary::builtin(), &kb, 50, 42);
    let eligible = eligible_points(&clean);
    ensure!(eligible >= 600, "only {eligible} eligible records");
    let plan = InjectionPlan {
        rate: 0.10,
        seed: 42,
        ..InjectionPlan::default()
    };
    let mut runs = Vec::new();
    for i in 0..2 {
        let r = inject_discrepancies(&clean, &kb, &plan).map_err(|e| e.to_string())?;
        let out = tmp.path().join(format!("run{i}"));
        export_dataset(&r.corrupted, &out).map_err(|e| e.to_string())?;
        runs.push((r, dir_bytes(&out)));
    }
    let (first, bytes) = &runs[0];
    let want = (0.10 * eligible as f64).round() as usize;
    ensure!(first.truth.annotations.len() == want, "{} annotations, want {want}", first.truth.annotations.len());
    let counts = first.truth.category_counts();
    let equal = want as f64 / 6.0;
    ensure!(
        counts.iter().all(|&c| (c as f64 - equal).abs() <= 1.0),
        "per-category counts {counts:?} vs {equal:.2} each"
    );
    ensure!(*bytes == runs[1].1, "corpus bytes differ between runs");
    let truth_a = serde_json::to_vec(&first.truth).unwrap();
    ensure!(truth_a == serde_json::to_vec(&runs[1].0.truth).unwrap(), "truth files differ");
    let restored = revert(&first.corrupted, &first.truth).map_err(|e| e.to_string())?;
    ensure!(restored == clean, "revert does not restore the clean corpus");
    export_dataset(&restored, &tmp.path().join("restored")).map_err(|e| e.to_string())?;
    export_dataset(&clean, &tmp.path().join("clean")).map_err(|e| e.to_string())?;
    ensure!(
        dir_bytes(&tmp.path().join("restored")) == dir_bytes(&tmp.path().join("clean")),
        "reverted files differ from clean files"
    );
    Ok(format!("{eligible} eligible, {want} annotations, per category {counts:?}"))
}

fn detector_quality() -> Outcome {
    let kb = KnowledgeBase::builtin();
    let clean = generate_patients(&ElementLibrary::builtin(), &kb, 50, 42);
    let plan = InjectionPlan {
        rate: 0.10,
        seed: 42,
        ..InjectionPlan::default()
    };
    let injected = inject_discrepancies(&clean, &kb, &plan).map_err(|e| e.to_string())?;
    let report = detect_all(&injected.corrupted, &kb, &DetectorConfig::default(), None);
    let eval = evaluate_detection(&report.findings, &injected.truth).map_err(|e| e.to_string())?;
    let recall = eval.metrics.recall.unwrap_or(0.0);
    let precision = eval.metrics.precision.unwrap_or(0.0);
    let fidelity = eval.category_fidelity.unwrap_or(0.0);
    ensure!(recall >= 0.95, "recall {recall:.3}");
    ensure!(precision >= 0.75, "precision {precision:.3}");
    ensure!(fidelity >= 0.80, "category fidelity {fidelity:.3}");
    let on_clean = detect_all(&clean, &kb, &DetectorConfig::default(), None);
    let false_alarms = on_clean.category_findings().count();
    ensure!(false_alarms == 0, "{false_alarms} category findings on the clean corpus");
    Ok(format!(
        "recall {recall:.3}, precision {precision:.3}, fidelity {fidelity:.3}, clean corpus 0 category findings"
    ))
}

fn e2e_once(dir: &Path) -> Result<Vec<u8>, String> {
    let kb = KnowledgeBase::builtin();
    let e = |e: anyhow::Error| format!("{e:#}");
    let (clean, trial) = (dir.join("clean"), dir.join("trial"));
    let (truth, findings, report) = (dir.join("truth.json"), dir.join("findings.ndjson"), dir.join("eval.json"));
    pipeline::generate(
        &GenerateArgs {
            out: &clean,
            patients: 50,
            seed: 42,
            library: None,
            overlay: None,
        },
        &kb,
    )
    .map_err(e)?;
    let plan = InjectionPlan {
        rate: 0.10,
        seed: 42,
        ..InjectionPlan::default()
    };
    pipeline::inject(&clean, &trial, &truth, &plan, &kb).map_err(e)?;
    pipeline::detect(&trial, &findings, None, &kb).map_err(e)?;
    pipeline::evaluate(&findings, &truth, &report).map_err(e)?;
    std::fs::read(&report).map_err(|e| e.to_string())
}

fn e2e_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = e2e_once(a.path())?;
    let rb = e2e_once(b.path())?;
    ensure!(ra == rb, "evaluation reports differ");
    Ok(format!("{} byte report identical across runs", ra.len()))
}

fn legal_moves() -> Vec<(QueryState, &'static str, QueryState)> {
    use QueryState::*;
    vec![
        (Draft, "edit", Draft),
        (Draft, "approve", Approved),
        (Draft, "reject", Rejected),
        (Approved, "send", Sent),
        (Sent, "answer", Answered),
        (Answered, "send", Sent),
        (Answered, "close", Closed),
    ]
}

fn action(name: &str) -> QueryAction {
    match name {
        "edit" => QueryAction::Edit { text: "revised".into() },
        "approve" => QueryAction::Approve,
        "reject" => QueryAction::Reject,
        "send" => QueryAction::Send,
        "answer" => QueryAction::Answer { response: "fixed".into() },
        "close" => QueryAction::Close,
        other => panic!("no action {other}"),
    }
}

const ACTIONS: [&str; 6] = ["edit", "approve", "reject", "send", "answer", "close"];

fn blank_query(id: &str, state: QueryState) -> ReviewQuery {
    serde_json::from_value(json!({
        "query_id": id, "finding_id": "F", "patient_id": "P", "category": null, "record_ids": [],
        "site_text": "Please verify.", "state": state, "edits": [], "created_ms": 0, "updated_ms": 0
    }))
    .unwrap()
}

fn query_lifecycle() -> Outcome {
    let table = legal_moves();
    let oracle = |s: QueryState, a: &str| table.iter().find(|(f, n, _)| *f == s && *n == a).map(|t| t.2);
    let mut pairs = 0;
    for s in QueryState::ALL {
        for a in ACTIONS {
            pairs += 1;
            ensure!(next_state(s, &action(a)) == oracle(s, a), "table disagrees at ({s}, {a})");
            let mut q = blank_query("Q-x", s);
            let mut log = AuditLog::new();
            let applied = transition(&mut q, action(a), "rev", 1, &mut log);
            match oracle(s, a) {
                Some(next) => ensure!(applied.is_ok() && q.state == next && log.len() == 1, "({s}, {a}) not applied"),
                None => ensure!(applied.is_err() && q.state == s && log.is_empty(), "({s}, {a}) not refused"),
            }
        }
    }
    let mut rng = StdRng::seed_from_u64(11);
    let mut log = AuditLog::new();
    let mut finals = Vec::new();
    let mut clock = 0i64;
    for i in 0..1000 {
        let id = format!("Q-{i}");
        let mut q = blank_query(&id, QueryState::Draft);
        clock += 1;
        q.created_ms = clock;
        log.append(creation_entry(&q, "rev")).map_err(|e| e.to_string())?;
        let mut expected = QueryState::Draft;
        for _ in 0..rng.gen_range(0..15) {
            let a = ACTIONS[rng.gen_range(0..ACTIONS.len())];
            clock += 1;
            let _ = transition(&mut q, action(a), "rev", clock, &mut log);
            if let Some(n) = oracle(expected, a) {
                expected = n;
            }
        }
        ensure!(q.state == expected, "{id} ended {} not {expected}", q.state);
        finals.push((id, expected));
    }
    for (id, expected) in &finals {
        let got = replay(log.for_subject(id)).map_err(|e| e.to_string())?;
        ensure!(got == *expected, "replay of {id} gives {got}, not {expected}");
    }
    Ok(format!("{pairs} pairs match the table, {} sequences replayed ({} entries)", finals.len(), log.len()))
}

fn scripted_sessions() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let kb = KnowledgeBase::builtin();
    let e = |e: anyhow::Error| format!("{e:#}");
    pipeline::generate(
        &GenerateArgs {
            out: &root.join("clean"),
            patients: 50,
            seed: 42,
            library: None,
            overlay: None,
        },
        &kb,
    )
    .map_err(e)?;
    let plan = InjectionPlan {
        rate: 0.10,
        seed: 42,
        ..InjectionPlan::default()
    };
    pipeline::inject(&root.join("clean"), &root.join("trial"), &root.join("truth.json"), &plan, &kb).map_err(e)?;
    std::fs::create_dir(root.join("store")).unwrap();
    let t = Arc::new(AtomicI64::new(0));
    let clock: Clock = Arc::new(move || t.fetch_add(60_000, Ordering::SeqCst));
    let state = AppState::open_with(ServiceConfig::new(root.join("store")), clock, None).map_err(|e| e.to_string())?;
    let import = serde_json::from_value(json!({
        "reviewer_id": "coordinator", "path": root.join("trial"), "truth_path": root.join("truth.json")
    }))
    .unwrap();
    state.import(import).map_err(|e| e.body.message)?;
    let ids: Vec<String> = state
        .findings(&Default::default())
        .map_err(|e| e.body.message)?
        .findings
        .into_iter()
        .map(|f| f.finding.finding_id)
        .collect();

    // correct decisions per reviewer: mean 3 unaided, six times that assisted
    let baseline = [2usize, 3, 4, 3, 1, 5, 3, 2, 4, 3];
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        for (i, b) in baseline.iter().enumerate() {
            let reviewer = format!("R{:02}", i + 1);
            for (condition, correct) in [("baseline", *b), ("assisted", 6 * b)] {
                let sid = format!("{reviewer}-{condition}");
                let req = json!({"reviewer_id": reviewer, "condition": condition, "session_id": sid});
                state
                    .create_session(serde_json::from_value(req).unwrap())
                    .map_err(|e| e.body.message)?;
                // one wrong dismissal, then the correct confirmations
                for (k, fid) in ids.iter().take(correct + 1).enumerate() {
                    let verdict = if k == 0 { "dismiss" } else { "confirm" };
                    let req = json!({"reviewer_id": reviewer, "finding_id": fid, "verdict": verdict});
                    state
                        .record_decision(&sid, serde_json::from_value(req).unwrap())
                        .await
                        .map_err(|e| e.body.message)?;
                }
                let req = json!({"reviewer_id": reviewer});
                state
                    .end_session(&sid, serde_json::from_value(req).unwrap())
                    .await
                    .map_err(|e| e.body.message)?;
            }
        }
        Ok::<_, String>(())
    })?;
    let report = rt.block_on(state.eval_report(None)).map_err(|e| e.body.message)?;
    let s = report.sessions.ok_or("no session report")?;
    let ratio = s.mean_ratio.ok_or("no ratio")?;
    let p = s.t_test.ok_or("no t-test")?.p_two_sided;
    ensure!(within(ratio, 6.0, 1e-9), "mean ratio {ratio}");
    ensure!(p < 0.001, "p = {p}");
    ensure!(
        s.baseline_mean == Some(3.0) && s.assisted_mean == Some(18.0),
        "means {:?} / {:?}",
        s.baseline_mean,
        s.assisted_mean
    );
    Ok(format!("{} sessions, ratio {ratio:.2}, p = {p:.2e}", s.sessions.len()))
}

fn main() -> ExitCode {
    let checks: [(&str, u64, fn() -> Outcome); 8] = [
        ("economics golden numbers", 1, econ_golden),
        ("statistics", 5, statistics),
        ("confusion metric reconstruction", 5, confusion_reconstruction),
        ("injection contract", 60, injection_contract),
        ("detector quality", 60, detector_quality),
        ("end-to-end determinism", 120, e2e_determinism),
        ("query lifecycle", 60, query_lifecycle),
        ("scripted-session pipeline", 60, scripted_sessions),
    ];
    let mut failed = 0;
    for (name, secs, f) in checks {
        if !run(name, Duration::from_secs(secs), f) {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
