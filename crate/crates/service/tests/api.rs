use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use crfcheck::config::{AssistantEndpoint, ServiceConfig};
use crfcheck::pipeline::{self, GenerateArgs};
use crfcheck::state::{AppState, Clock, FindingFilter};
use crfcheck_core::data::import_dataset;
use crfcheck_core::detector::{detect_all, DetectorConfig, FindingSource, StubAssistant};
use crfcheck_core::knowledge::KnowledgeBase;
use crfcheck_core::synthgen::InjectionPlan;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(patients: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let kb = KnowledgeBase::builtin();
        let clean = root.join("clean");
        pipeline::generate(
            &GenerateArgs {
                out: &clean,
                patients,
                seed: 42,
                library: None,
                overlay: None,
            },
            &kb,
        )
        .unwrap();
        let plan = InjectionPlan {
            rate: 0.10,
            seed: 42,
            ..InjectionPlan::default()
        };
        pipeline::inject(&clean, &root.join("trial"), &root.join("truth.json"), &plan, &kb).unwrap();
        std::fs::create_dir(root.join("store")).unwrap();
        Fixture { _dir: dir, root }
    }

    fn config(&self) -> ServiceConfig {
        ServiceConfig::new(self.root.join("store"))
    }

    fn trial(&self) -> PathBuf {
        self.root.join("trial")
    }
}

fn stepping_clock() -> Clock {
    let t = Arc::new(AtomicI64::new(1_700_000_000_000));
    Arc::new(move || t.fetch_add(1_000, Ordering::SeqCst))
}

fn app(cfg: ServiceConfig) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::open_with(cfg, stepping_clock(), None).unwrap());
    (crfcheck::api::router(state.clone()), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn import(app: &Router, fx: &Fixture) -> Value {
    let (status, body) = call(
        app,
        "POST",
        "/datasets/import",
        Some(json!({
            "reviewer_id": "rev-1",
            "path": fx.trial(),
            "truth_path": fx.root.join("truth.json"),
        })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body
}

fn audit_len(state: &AppState) -> usize {
    state.audit_entries(None).len()
}

fn ids(v: &Value) -> Vec<String> {
    v["findings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["finding_id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn import_requires_reviewer_and_reports_counts() {
    let fx = Fixture::new(12);
    let (app, state) = app(fx.config());
    let (status, body) = call(&app, "GET", "/datasets", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
    let (status, body) = call(&app, "POST", "/datasets/import", Some(json!({"path": fx.trial()}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad_request");
    let (status, _) = call(
        &app,
        "POST",
        "/datasets/import",
        Some(json!({"reviewer_id": " ", "path": fx.trial()})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(audit_len(&state), 0);

    let summary = import(&app, &fx).await;
    assert_eq!(summary["dataset_id"], "trial");
    assert_eq!(summary["patients"], 12);
    assert_eq!(summary["has_truth"], true);
    assert_eq!(summary["degraded"], false);
    assert!(summary.get("assistant").is_none());
    assert_eq!(audit_len(&state), 1);
    let (_, list) = call(&app, "GET", "/datasets", None).await;
    assert_eq!(list[0]["active"], true);

    let (status, _) = call(
        &app,
        "POST",
        "/datasets/import",
        Some(json!({"reviewer_id": "rev-1", "path": fx.root.join("missing")})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(audit_len(&state), 1);
}

#[tokio::test]
async fn findings_come_back_in_detector_priority_order() {
    let fx = Fixture::new(15);
    let (app, _) = app(fx.config());
    import(&app, &fx).await;
    let (status, body) = call(&app, "GET", "/findings?sort=priority", None).await;
    assert_eq!(status, StatusCode::OK);

    // independent run of the detector over the same files
    let ds = import_dataset(&fx.trial()).unwrap();
    let report = detect_all(&ds, &KnowledgeBase::builtin(), &DetectorConfig::default(), None);
    let expected: Vec<String> = report.findings.iter().map(|f| f.finding_id.clone()).collect();
    assert!(!expected.is_empty());
    assert_eq!(ids(&body), expected);

    let (_, default_sort) = call(&app, "GET", "/findings", None).await;
    assert_eq!(ids(&default_sort), expected);
    let (_, again) = call(&app, "GET", "/findings", None).await;
    assert_eq!(default_sort, again);

    let (status, _) = call(&app, "GET", "/findings?sort=random", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, by_cat) = call(&app, "GET", "/findings?category=3", None).await;
    assert!(by_cat["findings"].as_array().unwrap().iter().all(|f| f["category"] == 3));
    let (status, _) = call(&app, "GET", "/findings?category=9", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, critical) = call(&app, "GET", "/findings?severity=critical", None).await;
    assert!(critical["findings"].as_array().unwrap().iter().all(|f| f["severity"] == "critical"));
}

#[tokio::test]
async fn finding_detail_carries_all_evidence() {
    let fx = Fixture::new(15);
    let (app, _) = app(fx.config());
    import(&app, &fx).await;
    let (_, list) = call(&app, "GET", "/findings", None).await;
    for id in ids(&list) {
        let (status, detail) = call(&app, "GET", &format!("/findings/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let cited: Vec<&str> = detail["record_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        let shown: Vec<&str> = detail["evidence"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["record_id"].as_str().unwrap())
            .collect();
        assert_eq!(cited, shown);
        assert!(detail["suggested_query"].as_str().unwrap().contains(cited[0]));
        assert!(!detail["timeline"].as_array().unwrap().is_empty());
    }
    let (status, body) = call(&app, "GET", "/findings/F0-nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
}

#[tokio::test]
async fn patient_profile_projects_records_and_timeline() {
    let fx = Fixture::new(6);
    let (app, _) = app(fx.config());
    import(&app, &fx).await;
    let ds = import_dataset(&fx.trial()).unwrap();
    let pid = &ds.patients[0].patient_id;
    let (status, body) = call(&app, "GET", &format!("/patients/{pid}/profile"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["patient_id"], pid.as_str());
    let expected_aes = ds.adverse_events.iter().filter(|a| &a.patient_id == pid).count();
    assert_eq!(body["records"]["adverse_events"].as_array().unwrap().len(), expected_aes);
    assert!(!body["context"]["timeline"].as_array().unwrap().is_empty());
    let (status, _) = call(&app, "GET", "/patients/P-none/profile", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn query_lifecycle_over_http() {
    let fx = Fixture::new(12);
    let (app, state) = app(fx.config());
    import(&app, &fx).await;
    let (_, list) = call(&app, "GET", "/findings", None).await;
    let fid = ids(&list)[0].clone();

    let before = audit_len(&state);
    let (status, q) = call(&app, "POST", "/queries", Some(json!({"finding_id": fid}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(audit_len(&state), before);
    let (status, q2) = call(&app, "POST", "/queries", Some(json!({"reviewer_id": "rev-1", "finding_id": fid}))).await;
    assert_eq!(status, StatusCode::CREATED, "{q}");
    assert_eq!(q2["state"], "draft");
    let qid = q2["query_id"].as_str().unwrap().to_string();
    assert_eq!(audit_len(&state), before + 1);
    let (status, _) = call(&app, "POST", "/queries", Some(json!({"reviewer_id": "rev-1", "finding_id": fid}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // illegal: draft cannot be sent
    let uri = format!("/queries/{qid}/transition");
    let (status, err) = call(&app, "POST", &uri, Some(json!({"reviewer_id": "rev-1", "action": "send"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "illegal_transition");
    assert_eq!(err["state"], "draft");
    assert!(err["message"].as_str().unwrap().contains("draft"));
    assert_eq!(audit_len(&state), before + 1);

    let (status, _) = call(&app, "POST", &uri, Some(json!({"reviewer_id": "rev-1", "action": "edit", "text": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, edited) = call(
        &app,
        "POST",
        &uri,
        Some(json!({"reviewer_id": "rev-2", "action": "edit", "text": "Please confirm the start date."})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(edited["edits"].as_array().unwrap().len(), 1);
    assert_eq!(edited["edits"][0]["actor"], "rev-2");

    for (action, state_after) in [("approve", "approved"), ("send", "sent")] {
        let (status, q) = call(&app, "POST", &uri, Some(json!({"reviewer_id": "rev-1", "action": action}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(q["state"], state_after);
    }
    let (_, q) = call(
        &app,
        "POST",
        &format!("/queries/{qid}/decision"),
        Some(json!({"reviewer_id": "site", "action": "answer", "response": "Corrected."})),
    )
    .await;
    assert_eq!(q["state"], "answered");
    let (_, q) = call(&app, "POST", &uri, Some(json!({"reviewer_id": "rev-1", "action": "close"}))).await;
    assert_eq!(q["state"], "closed");
    let (status, err) = call(&app, "POST", &uri, Some(json!({"reviewer_id": "rev-1", "action": "approve"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["state"], "closed");

    // creation plus edit, approve, send, answer, close
    let (_, detail) = call(&app, "GET", &format!("/queries/{qid}"), None).await;
    assert_eq!(detail["history"].as_array().unwrap().len(), 6);
    assert_eq!(audit_len(&state), before + 6);
    let (_, fview) = call(&app, "GET", &format!("/findings/{fid}"), None).await;
    assert_eq!(fview["query_state"], "closed");
    assert_eq!(fview["query"]["state"], "closed");

    let (status, _) = call(&app, "POST", "/queries/Q-none/transition", Some(json!({"reviewer_id": "r", "action": "approve"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", &uri, Some(json!({"reviewer_id": "r", "action": "teleport"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_approvals_apply_once() {
    let fx = Fixture::new(8);
    let (app, state) = app(fx.config());
    import(&app, &fx).await;
    let (_, list) = call(&app, "GET", "/findings", None).await;
    let fid = ids(&list)[0].clone();
    let (_, q) = call(&app, "POST", "/queries", Some(json!({"reviewer_id": "rev-1", "finding_id": fid}))).await;
    let uri = format!("/queries/{}/transition", q["query_id"].as_str().unwrap());
    let before = audit_len(&state);
    let mut tasks = Vec::new();
    for i in 0..16 {
        let app = app.clone();
        let uri = uri.clone();
        tasks.push(tokio::spawn(async move {
            call(&app, "POST", &uri, Some(json!({"reviewer_id": format!("r{i}"), "action": "approve"}))).await.0
        }));
    }
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(audit_len(&state), before + 1);
}

#[tokio::test]
async fn sessions_record_decisions_and_feed_reports() {
    let fx = Fixture::new(15);
    let (app, state) = app(fx.config());
    import(&app, &fx).await;
    let (_, list) = call(&app, "GET", "/findings", None).await;
    let fids = ids(&list);

    let (status, s) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"reviewer_id": "rev-1", "condition": "assisted", "session_id": "S-A"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{s}");
    assert_eq!(s["decision_count"], 0);
    assert_eq!(s["score"]["throughput"], 0);
    let (status, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"reviewer_id": "rev-1", "condition": "assisted", "session_id": "S-A"})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let before = audit_len(&state);
    for fid in fids.iter().take(10) {
        let (status, _) = call(
            &app,
            "POST",
            "/sessions/S-A/decisions",
            Some(json!({"reviewer_id": "rev-1", "finding_id": fid, "verdict": "confirm"})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
    }
    assert_eq!(audit_len(&state), before + 10);
    let (status, _) = call(
        &app,
        "POST",
        "/sessions/S-A/decisions",
        Some(json!({"reviewer_id": "rev-1", "finding_id": fids[0], "verdict": "dismiss"})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(
        &app,
        "POST",
        "/sessions/S-A/decisions",
        Some(json!({"reviewer_id": "rev-9", "finding_id": fids[11], "verdict": "confirm"})),
    )
    .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = call(
        &app,
        "POST",
        "/sessions/S-A/decisions",
        Some(json!({"reviewer_id": "rev-1", "finding_id": "F-none", "verdict": "confirm"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(audit_len(&state), before + 10);

    let (_, view) = call(&app, "GET", "/sessions/S-A", None).await;
    assert_eq!(view["decision_count"], 10);
    // every finding on an injected corpus is real, so confirms are correct
    assert_eq!(view["score"]["throughput"], 10);
    assert_eq!(view["score"]["confusion"]["tp"], 10);
    let (_, f) = call(&app, "GET", &format!("/findings/{}", fids[0]), None).await;
    assert_eq!(f["decision"], "confirm");

    let (status, ended) = call(&app, "POST", "/sessions/S-A/end", Some(json!({"reviewer_id": "rev-1"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ended["ended_ms"].is_i64());
    let (status, _) = call(&app, "POST", "/sessions/S-A/end", Some(json!({"reviewer_id": "rev-1"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, base) = call(&app, "POST", "/sessions", Some(json!({"reviewer_id": "rev-1", "condition": "baseline"}))).await;
    let bid = base["session_id"].as_str().unwrap().to_string();
    for fid in fids.iter().skip(10).take(2) {
        call(
            &app,
            "POST",
            &format!("/sessions/{bid}/decisions"),
            Some(json!({"reviewer_id": "rev-1", "finding_id": fid, "verdict": "confirm"})),
        )
        .await;
    }
    let (status, report) = call(&app, "GET", "/reports/eval", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["detection"]["metrics"]["recall"], 1.0);
    for key in ["accuracy", "precision", "recall", "f1_score", "error_rate", "false_positive_share"] {
        assert!(report["detection"]["metrics"].get(key).is_some(), "{key}");
    }
    assert_eq!(report["sessions"]["reviewers"][0]["ratio"], 5.0);
    let (_, sessions) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(sessions.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn econ_report_and_overrides() {
    let fx = Fixture::new(4);
    let (app, _) = app(fx.config());
    let (status, r) = call(&app, "GET", "/reports/econ", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["lines"][0]["savings"], 420000.0);
    assert!((r["total"]["savings"].as_f64().unwrap() - 5_107_510.0).abs() <= 50.0);
    let (_, r) = call(&app, "GET", "/reports/econ?days_saved=12", None).await;
    assert_eq!(r["lines"][2]["savings"], 10_560_000.0);
    let (status, csv) = call(&app, "GET", "/reports/econ?format=csv", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(csv.as_str().unwrap().starts_with("line,traditional"));
    for bad in ["?days_saved=lots", "?vibes=1", "?days_saved=99", "?format=xml"] {
        let (status, _) = call(&app, "GET", &format!("/reports/econ{bad}"), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn no_dataset_means_not_found() {
    let fx = Fixture::new(2);
    let (app, _) = app(fx.config());
    for uri in ["/findings", "/findings/F1-x", "/reports/eval", "/patients/P1/profile"] {
        let (status, _) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    let (_, rules) = call(&app, "GET", "/kb/grading_rules", None).await;
    assert!(!rules.as_array().unwrap().is_empty());
}

#[tokio::test]
async fn state_survives_restart() {
    let fx = Fixture::new(8);
    let cfg = fx.config();
    let (qid, digest_len, findings) = {
        let (app, state) = app(cfg.clone());
        import(&app, &fx).await;
        let (_, list) = call(&app, "GET", "/findings", None).await;
        let fid = ids(&list)[0].clone();
        let (_, q) = call(&app, "POST", "/queries", Some(json!({"reviewer_id": "rev-1", "finding_id": fid}))).await;
        let qid = q["query_id"].as_str().unwrap().to_string();
        call(
            &app,
            "POST",
            &format!("/queries/{qid}/transition"),
            Some(json!({"reviewer_id": "rev-1", "action": "approve"})),
        )
        .await;
        call(&app, "POST", "/sessions", Some(json!({"reviewer_id": "rev-1", "condition": "baseline", "session_id": "S1"}))).await;
        call(
            &app,
            "POST",
            "/sessions/S1/decisions",
            Some(json!({"reviewer_id": "rev-1", "finding_id": fid, "verdict": "dismiss"})),
        )
        .await;
        (qid, audit_len(&state), list)
    };
    let (app, state) = app(cfg);
    assert_eq!(audit_len(&state), digest_len);
    let (_, q) = call(&app, "GET", &format!("/queries/{qid}"), None).await;
    assert_eq!(q["state"], "approved");
    assert_eq!(q["history"].as_array().unwrap().len(), 2);
    let (_, s) = call(&app, "GET", "/sessions/S1", None).await;
    assert_eq!(s["decision_count"], 1);
    let (_, list) = call(&app, "GET", "/findings", None).await;
    assert_eq!(ids(&list), ids(&findings));
    assert_eq!(list["findings"][0]["decision"], "dismiss");
    assert_eq!(list["findings"][0]["query_state"], "approved");
}

fn write_config(dir: &Path, cfg: &ServiceConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

#[test]
fn startup_fails_with_a_cause() {
    let fx = Fixture::new(2);
    let mut cfg = fx.config();
    cfg.data_dir = fx.root.join("absent");
    let err = AppState::open(cfg).err().unwrap();
    assert!(err.to_string().contains("does not exist"), "{err}");
    let mut cfg = fx.config();
    cfg.assistant = Some(AssistantEndpoint {
        url: "http://127.0.0.1:9".into(),
        timeout_ms: 0,
    });
    assert!(AppState::open(cfg).is_err());
    let cfg = fx.config();
    let path = write_config(&fx.root, &cfg);
    assert_eq!(ServiceConfig::load(&path).unwrap(), cfg);
    std::fs::write(fx.root.join("store/queries.ndjson"), "{broken\n").unwrap();
    let err = AppState::open(fx.config()).err().unwrap();
    assert!(err.to_string().contains("queries.ndjson"), "{err}");
}

async fn mock_assistant(reply: Value) -> String {
    let app = Router::new().route(
        "/adjudicate",
        axum::routing::post(move |axum::Json(req): axum::Json<Value>| {
            let mut reply = reply.clone();
            // echo the category the rule assigned
            if reply["category"].is_null() {
                reply["category"] = req["finding"]["category"].clone();
            }
            async move { axum::Json(reply) }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_assistant_adjudicates_findings() {
    let fx = Fixture::new(8);
    let url = mock_assistant(json!({"agree": true, "category": null, "confidence": 0.93, "rationale": "Consistent."})).await;
    let mut cfg = fx.config();
    cfg.assistant = Some(AssistantEndpoint { url, timeout_ms: 5_000 });
    let (app, _) = app(cfg);
    let summary = import(&app, &fx).await;
    assert_eq!(summary["degraded"], false);
    assert!(summary["assistant"].as_str().unwrap().ends_with("/adjudicate"));
    let (_, list) = call(&app, "GET", "/findings", None).await;
    for f in list["findings"].as_array().unwrap() {
        assert_eq!(f["source"], "rule+assistant");
        assert_eq!(f["confidence"], 0.93);
        assert_eq!(f["assistant"]["agree"], true);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unreachable_assistant_degrades_to_rules() {
    let fx = Fixture::new(8);
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = fx.config();
    cfg.assistant = Some(AssistantEndpoint {
        url: format!("http://127.0.0.1:{port}"),
        timeout_ms: 2_000,
    });
    let (app, _) = app(cfg);
    let summary = import(&app, &fx).await;
    assert_eq!(summary["degraded"], true);

    let ds = import_dataset(&fx.trial()).unwrap();
    let rules = detect_all(&ds, &KnowledgeBase::builtin(), &DetectorConfig::default(), None);
    let (_, list) = call(&app, "GET", "/findings", None).await;
    let served: Vec<Value> = list["findings"].as_array().unwrap().clone();
    assert_eq!(served.len(), rules.findings.len());
    for (s, r) in served.iter().zip(&rules.findings) {
        assert_eq!(s["finding_id"], r.finding_id.as_str());
        assert_eq!(s["source"], "rule");
        assert_eq!(s["confidence"], r.confidence);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_assistant_replies_are_ignored() {
    let fx = Fixture::new(6);
    let url = mock_assistant(json!({"agree": true, "category": null, "confidence": 7.0, "rationale": "x"})).await;
    let mut cfg = fx.config();
    cfg.assistant = Some(AssistantEndpoint { url, timeout_ms: 5_000 });
    let (app, _) = app(cfg);
    let summary = import(&app, &fx).await;
    assert_eq!(summary["degraded"], true);
    let (_, list) = call(&app, "GET", "/findings", None).await;
    assert!(list["findings"].as_array().unwrap().iter().all(|f| f["source"] == "rule"));
}

#[test]
fn injected_assistant_overrides_config() {
    let fx = Fixture::new(6);
    let state = AppState::open_with(fx.config(), stepping_clock(), Some(Arc::new(StubAssistant))).unwrap();
    let summary = state
        .import(serde_json::from_value(json!({"reviewer_id": "r", "path": fx.trial()})).unwrap())
        .unwrap();
    assert_eq!(summary.assistant.as_deref(), Some("stub"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_assistant_times_out_and_degrades() {
    let fx = Fixture::new(4);
    let app = Router::new().route(
        "/adjudicate",
        axum::routing::post(|| async {
            tokio::time::sleep(std::time::Duration::from_millis(400)).await;
            axum::Json(json!({"agree": true, "category": null, "confidence": 0.9, "rationale": ""}))
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let mut cfg = fx.config();
    cfg.assistant = Some(AssistantEndpoint {
        url: format!("http://{addr}"),
        timeout_ms: 50,
    });
    let state = Arc::new(AppState::open_with(cfg, stepping_clock(), None).unwrap());
    let s = state.clone();
    let trial = fx.trial();
    let summary = tokio::task::spawn_blocking(move || {
        s.import(serde_json::from_value(json!({"reviewer_id": "r", "path": trial})).unwrap())
    })
    .await
    .unwrap()
    .unwrap();
    assert!(summary.degraded);
    let endpoint = state.config.assistant.clone().unwrap();
    let (trial, out) = (fx.trial(), fx.root.join("f.ndjson"));
    let detected = tokio::task::spawn_blocking(move || {
        pipeline::detect(&trial, &out, Some(&endpoint), &KnowledgeBase::builtin()).unwrap()
    })
    .await
    .unwrap();
    assert!(detected.degraded);
    assert!(!detected.assistant_errors.is_empty());
    assert!(detected.assistant_errors.iter().all(|e| e.contains("timed out")), "{:?}", detected.assistant_errors);
    let list = state.findings(&FindingFilter::default()).unwrap();
    assert!(list.findings.iter().all(|f| f.finding.source == FindingSource::Rule));
}
