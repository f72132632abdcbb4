#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use chrono::{NaiveDate, TimeZone, Utc};
use http_body_util::BodyExt;
use qarisk::expr::ExprRegistry;
use qarisk::learn::{explain, train, GbmModel, Node, TrainConfig, Tree, MODEL_FORMAT_VERSION};
use qarisk::model::TestCase;
use qarisk::pipeline::run::artifacts;
use qarisk::pipeline::{
    history_query, load_config, DefectState, FixedClock, RbtState, RunStore, RunSummary, ServingState,
};
use qarisk::risk::{compute_all, CriteriaContext, CriteriaSet};
use qarisk::select::{Budget, PlanInputs, SelectionPlan, StaleThresholds};
use qarisk::synth::{catalog, catalog_criteria, fixture_files, imbalanced_classification, CatalogParams, FIXTURE_SEED};
use qarisk_service::{
    router, AppState, CommitList, CommitRisk, CriteriaDoc, ErrorDoc, ExplanationDoc, JobState, JobStatus, RunsDoc,
    EPHEMERAL_HEADER, RUN_HEADER,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    dir: TempDir,
    state: Arc<AppState>,
    app: Router,
}

fn clock() -> Arc<FixedClock> {
    Arc::new(FixedClock(Utc.with_ymd_and_hms(2024, 6, 1, 6, 0, 0).unwrap()))
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    for (rel, content) in fixture_files(FIXTURE_SEED) {
        let path = dir.path().join(rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, content).unwrap();
    }
    let pipelines = ["rbt.toml", "pipeline.toml"]
        .iter()
        .map(|f| load_config(&dir.path().join(f)).unwrap())
        .collect();
    let state = Arc::new(AppState::new(dir.path().join("art"), pipelines, clock()).unwrap());
    let app = router(state.clone());
    Fixture { dir, state, app }
}

/// An app over a hand-built snapshot and an empty artifact directory.
fn app_with(serving: ServingState) -> (TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::new(dir.path(), Vec::new(), clock()).unwrap());
    state.install(serving);
    (dir, router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, HeaderMap, Bytes) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    (status, headers, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, _, body) = call(app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn error_code(body: &Bytes) -> String {
    serde_json::from_slice::<ErrorDoc>(body).unwrap().code
}

async fn run_to_completion(f: &Fixture, pipeline: &str) -> JobStatus {
    let (status, _, body) = call(&f.app, "POST", &format!("/pipelines/{pipeline}/run"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let queued: JobStatus = serde_json::from_slice(&body).unwrap();
    assert_eq!(queued.state, JobState::Queued);
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let job: JobStatus = get_json(&f.app, &format!("/pipelines/{pipeline}/run")).await;
        if !job.state.is_active() {
            return job;
        }
        assert!(Instant::now() < deadline, "run did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn endpoints_before_any_run() {
    let f = fixture();
    let (s, _, b) = call(&f.app, "GET", "/tests/ranked", None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::NOT_FOUND, "service.NoRunYet")
    );
    let (s, _, b) = call(&f.app, "POST", "/whatif", Some(json!({}))).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::CONFLICT, "service.NoCachedCriteria")
    );
    let (s, _, b) = call(&f.app, "GET", "/commits/c1/risk", None).await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::CONFLICT, "service.NoModel"));
    let (s, _, b) = call(&f.app, "GET", "/commits/c1/explanation", None).await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::CONFLICT, "service.NoModel"));
    let runs: RunsDoc = get_json(&f.app, "/runs?pipeline=nightly").await;
    assert!(runs.runs.is_empty());
    let (s, _, b) = call(&f.app, "GET", "/runs?pipeline=elsewhere", None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::NOT_FOUND, "service.UnknownPipeline")
    );
    let (s, _, b) = call(&f.app, "GET", "/runs", None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::BAD_REQUEST, "service.MalformedRequest")
    );
    let (s, _, b) = call(&f.app, "POST", "/pipelines/elsewhere/run", None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::NOT_FOUND, "service.UnknownPipeline")
    );
    let (s, _, _) = call(&f.app, "GET", "/pipelines/nightly/run", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn trigger_runs_through_queued_running_done() {
    let f = fixture();
    let (first, _, _) = call(&f.app, "POST", "/pipelines/nightly/run", None).await;
    assert_eq!(first, StatusCode::ACCEPTED);
    // the first job cannot have finished before this handler runs
    let (second, _, body) = call(&f.app, "POST", "/pipelines/nightly/run", None).await;
    assert_eq!(
        (second, error_code(&body).as_str()),
        (StatusCode::CONFLICT, "service.AlreadyRunning")
    );

    let deadline = Instant::now() + Duration::from_secs(120);
    let job = loop {
        let job: JobStatus = get_json(&f.app, "/pipelines/nightly/run").await;
        if !job.state.is_active() {
            break job;
        }
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(
        job.transitions,
        vec![JobState::Queued, JobState::Running, JobState::Done],
        "{:?}",
        job.error
    );
    assert_eq!(job.run_id.as_deref(), Some("nightly-000001"));

    // finished, so a new trigger is accepted
    let again = run_to_completion(&f, "nightly").await;
    assert_eq!(again.job, 2);
    assert_eq!(again.run_id.as_deref(), Some("nightly-000002"));

    let runs: RunsDoc = get_json(&f.app, "/runs?pipeline=nightly").await;
    let store = RunStore::new(f.state.artifact_dir());
    assert_eq!(runs.runs, history_query(&store, "nightly", None).unwrap());
    assert_eq!(runs.runs.len(), 2);
    assert!(runs
        .runs
        .iter()
        .all(|r| r.metrics.contains_key("selection.selected_count")));
    let none: RunsDoc = get_json(&f.app, "/runs?pipeline=nightly&from=2024-06-02").await;
    assert!(none.runs.is_empty());
    let same: RunsDoc = get_json(&f.app, "/runs?pipeline=nightly&from=2024-06-01&to=2024-06-01").await;
    assert_eq!(same.runs, runs.runs);
}

#[tokio::test]
async fn failed_runs_report_their_error() {
    let f = fixture();
    std::fs::remove_file(f.dir.path().join("records.ndjson")).unwrap();
    let job = run_to_completion(&f, "rbt").await;
    assert_eq!(
        job.transitions,
        vec![JobState::Queued, JobState::Running, JobState::Failed]
    );
    assert!(job.error.unwrap().starts_with("pipeline.SourceUnreadable"));
    let runs: RunsDoc = get_json(&f.app, "/runs?pipeline=rbt").await;
    let summaries: &[RunSummary] = &runs.runs;
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].failed_stage.as_deref(), Some("ingest"));
    let (s, _, _) = call(&f.app, "GET", "/tests/ranked", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

fn digest_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let sha = hex::encode(Sha256::digest(std::fs::read(&path).unwrap()));
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), sha);
            }
        }
    }
    out
}

#[tokio::test]
async fn ranked_plan_and_whatif_after_a_run() {
    let f = fixture();
    assert_eq!(run_to_completion(&f, "nightly").await.state, JobState::Done);

    let (s, headers, ranked_bytes) = call(&f.app, "GET", "/tests/ranked", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers[RUN_HEADER], "nightly-000001");
    assert!(headers.get(EPHEMERAL_HEADER).is_none());
    let plan: SelectionPlan = serde_json::from_slice(&ranked_bytes).unwrap();
    let ranks: Vec<usize> = plan.entries.iter().map(|e| e.ranked.rank).collect();
    assert_eq!(ranks, (1..=plan.entries.len()).collect::<Vec<_>>());
    assert!(!plan.entries[0].ranked.breakdown.is_empty());

    // same order as the exported plan file
    let tsv = std::fs::read_to_string(f.dir.path().join("exports/nightly_plan.tsv")).unwrap();
    let file_ids: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap()).collect();
    let api_ids: Vec<&str> = plan.entries.iter().map(|e| e.ranked.test_id.as_str()).collect();
    assert_eq!(file_ids, api_ids);

    let before = digest_tree(f.state.artifact_dir());

    let (s, headers, empty) = call(&f.app, "POST", "/whatif", Some(json!({"overrides": {}}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers[EPHEMERAL_HEADER], "true");
    assert_eq!(empty, ranked_bytes);

    let doc: CriteriaDoc = get_json(&f.app, "/criteria").await;
    assert_eq!(doc.set, "selection");
    let halved: BTreeMap<String, f64> = doc.criteria.iter().map(|c| (c.name.clone(), c.weight * 0.5)).collect();
    let (_, _, body) = call(
        &f.app,
        "POST",
        "/whatif",
        Some(json!({"base": "selection", "overrides": halved})),
    )
    .await;
    let scaled: SelectionPlan = serde_json::from_slice(&body).unwrap();
    let scaled_ids: Vec<&str> = scaled.entries.iter().map(|e| e.ranked.test_id.as_str()).collect();
    assert_eq!(scaled_ids, api_ids);

    let (_, _, body) = call(&f.app, "POST", "/whatif", Some(json!({"budget": {"count": 5}}))).await;
    let small: SelectionPlan = serde_json::from_slice(&body).unwrap();
    assert_eq!(small.selected_count(), 5);

    for (req, status, code) in [
        (
            json!({"overrides": {"nope": 0.5}}),
            StatusCode::BAD_REQUEST,
            "service.UnknownCriterion",
        ),
        (
            json!({"overrides": {"usage": 1.5}}),
            StatusCode::BAD_REQUEST,
            "service.InvalidWeight",
        ),
        (
            json!({"overrides": {"usage": -0.1}}),
            StatusCode::BAD_REQUEST,
            "service.InvalidWeight",
        ),
        (
            json!({"base": "other"}),
            StatusCode::CONFLICT,
            "service.NoCachedCriteria",
        ),
        (
            json!({"budget": {"count": 0}}),
            StatusCode::BAD_REQUEST,
            "select.InvalidBudget",
        ),
        (
            json!({"weights": {}}),
            StatusCode::BAD_REQUEST,
            "service.MalformedRequest",
        ),
    ] {
        let (s, _, b) = call(&f.app, "POST", "/whatif", Some(req.clone())).await;
        assert_eq!((s, error_code(&b).as_str()), (status, code), "{req}");
    }

    // what-if never touches persisted artifacts
    assert_eq!(digest_tree(f.state.artifact_dir()), before);
    let (_, _, after) = call(&f.app, "GET", "/tests/ranked", None).await;
    assert_eq!(after, ranked_bytes);
}

#[tokio::test]
async fn concurrent_reads_agree() {
    let f = fixture();
    run_to_completion(&f, "rbt").await;
    let (_, _, expected) = call(&f.app, "GET", "/tests/ranked", None).await;
    let mut handles = Vec::new();
    for k in 0..32 {
        let app = f.app.clone();
        handles.push(tokio::spawn(async move {
            if k % 2 == 0 {
                call(&app, "GET", "/tests/ranked", None).await.2
            } else {
                call(&app, "POST", "/whatif", Some(json!({}))).await.2
            }
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), expected);
    }
}

#[tokio::test]
async fn commit_risk_and_explanation_follow_the_model() {
    let f = fixture();
    let job = run_to_completion(&f, "nightly").await;
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    let snap = f.state.snapshot();
    let d = snap.defect.as_ref().unwrap();
    let record = RunStore::new(f.state.artifact_dir())
        .latest("nightly")
        .unwrap()
        .unwrap();
    let alerts = std::fs::read(
        f.state
            .artifact_dir()
            .join(&record.artifact("defects", artifacts::ALERTS).unwrap().path),
    )
    .unwrap();
    let alerts: Vec<Value> = serde_json::from_slice(&alerts).unwrap();
    assert!(!alerts.is_empty());
    let planted = alerts[0]["commit_id"].as_str().unwrap();

    let risk: CommitRisk = get_json(&f.app, &format!("/commits/{planted}/risk")).await;
    assert!(risk.alert);
    assert_eq!(risk.threshold, 0.5);
    let x = &d.features[planted];
    assert_eq!(risk.score.to_bits(), d.model.predict_proba(x).unwrap().to_bits());

    let strict: CommitRisk = get_json(&f.app, &format!("/commits/{planted}/risk?threshold=0.999999")).await;
    assert_eq!(strict.score, risk.score);
    assert_eq!(strict.alert, risk.score >= 0.999999);
    let (s, _, b) = call(&f.app, "GET", &format!("/commits/{planted}/risk?threshold=1.5"), None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::BAD_REQUEST, "learn.InvalidThreshold")
    );

    let list: CommitList = get_json(&f.app, "/commits").await;
    assert_eq!(list.commits.len(), d.features.len());
    assert_eq!(list.commits.iter().filter(|c| c.alert).count(), alerts.len());

    for id in d.features.keys().take(40) {
        let doc: ExplanationDoc = get_json(&f.app, &format!("/commits/{id}/explanation")).await;
        let e = &doc.explanation;
        let total: f64 = e.contributions.iter().map(|c| c.contribution).sum();
        assert!((e.base_value + total - e.raw).abs() < 1e-6);
        assert_eq!(e, &explain(&d.model, &d.features[id]).unwrap());
        assert_eq!(doc.top.len(), d.top_features);
    }
    let (s, _, b) = call(&f.app, "GET", "/commits/missing/risk", None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::NOT_FOUND, "service.UnknownCommit")
    );
    let (s, _, b) = call(&f.app, "GET", "/commits/missing/explanation", None).await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::NOT_FOUND, "service.UnknownCommit")
    );
}

fn defect_state(model: GbmModel, rows: Vec<Vec<f64>>) -> ServingState {
    ServingState {
        rbt: None,
        defect: Some(DefectState {
            run_id: "hand-000001".into(),
            stage: "defects".into(),
            model,
            threshold: 0.5,
            top_features: 2,
            features: rows
                .into_iter()
                .enumerate()
                .map(|(k, x)| (format!("c{k}"), x))
                .collect(),
        }),
    }
}

#[tokio::test]
async fn stump_explanations_have_one_nonzero_contribution() {
    let stump = GbmModel {
        format_version: MODEL_FORMAT_VERSION,
        schema_hash: "hand".into(),
        feature_names: vec!["a".into(), "b".into(), "c".into()],
        base_score: -0.5,
        learning_rate: 1.0,
        max_depth: 1,
        trees: vec![Tree {
            nodes: vec![
                Node::Split {
                    feature: 1,
                    threshold: 2.0,
                    left: 1,
                    right: 2,
                    cover: 4.0,
                },
                Node::Leaf {
                    value: -1.0,
                    cover: 3.0,
                },
                Node::Leaf { value: 2.0, cover: 1.0 },
            ],
        }],
    };
    let (_dir, app) = app_with(defect_state(stump, vec![vec![9.0, 1.0, -3.0], vec![0.0, 5.0, 0.0]]));
    for id in ["c0", "c1"] {
        let doc: ExplanationDoc = get_json(&app, &format!("/commits/{id}/explanation")).await;
        let nonzero: Vec<usize> = doc
            .explanation
            .contributions
            .iter()
            .filter(|c| c.contribution != 0.0)
            .map(|c| c.index)
            .collect();
        assert_eq!(nonzero, vec![1]);
        assert_eq!(doc.top[0].feature, "b");
    }
    // base is the cover-weighted leaf mean: -0.5 + (3·-1 + 1·2) / 4
    let doc: ExplanationDoc = get_json(&app, "/commits/c1/explanation").await;
    assert!((doc.explanation.base_value - -0.75).abs() < 1e-12);
    assert!((doc.explanation.contributions[1].contribution - 2.25).abs() < 1e-12);
}

#[tokio::test]
async fn explanations_match_brute_force_shapley() {
    let set = imbalanced_classification(250, 5, 3, 3.0, 11);
    let model = train(
        &set,
        &TrainConfig {
            n_trees: 20,
            max_depth: 3,
            seed: 11,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let rows: Vec<Vec<f64>> = set.x[..30].to_vec();
    let (_dir, app) = app_with(defect_state(model.clone(), rows.clone()));
    for (k, x) in rows.iter().enumerate() {
        let doc: ExplanationDoc = get_json(&app, &format!("/commits/c{k}/explanation")).await;
        let phi = oracles::shapley(&model, x);
        for (c, p) in doc.explanation.contributions.iter().zip(&phi) {
            assert!((c.contribution - p).abs() < 1e-6);
        }
        assert!((doc.explanation.base_value - oracles::expected_output(&model, 5)).abs() < 1e-6);
    }
}

const TWO_TEST_CRITERIA: &str = r#"
[[criteria]]
name = "crashes"
kind = "probability"
weight = 0.5
normalization = { type = "passthrough" }
source = { manual = "crashes" }

[[criteria]]
name = "churn"
kind = "probability"
weight = 0.5
normalization = { type = "passthrough" }
source = { manual = "churn" }

[[criteria]]
name = "impact"
kind = "impact"
weight = 1.0
normalization = { type = "passthrough" }
source = { manual = "impact" }

[[criteria]]
name = "freshness"
kind = "time"
weight = 1.0
normalization = { type = "passthrough" }
source = { manual = "freshness" }
"#;

fn rbt_state(inputs: PlanInputs) -> ServingState {
    let plan = inputs.plan(&BTreeMap::new(), None).unwrap();
    ServingState {
        rbt: Some(RbtState {
            run_id: "hand-000001".into(),
            stage: "selection".into(),
            plan,
            inputs: Some(inputs),
        }),
        defect: None,
    }
}

#[tokio::test]
async fn zeroing_the_elevating_weight_does_not_improve_rank() {
    let today = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap();
    let test = |id: &str, crashes: f64, churn: f64| TestCase {
        id: id.into(),
        title: id.into(),
        area: "core".into(),
        automated: true,
        created_on: today,
        manual: BTreeMap::from([
            ("crashes".to_string(), crashes),
            ("churn".to_string(), churn),
            ("impact".to_string(), 5.0),
            ("freshness".to_string(), 1.0),
        ]),
    };
    // x leads only because of its crash count
    let tests = vec![test("x", 10.0, 2.0), test("y", 5.0, 5.0)];
    let set = CriteriaSet::from_toml(TWO_TEST_CRITERIA).unwrap();
    let registry = ExprRegistry::new();
    let ctx = CriteriaContext::new(&[], &[], &[], &[], &registry);
    let inputs = PlanInputs {
        items: compute_all(&tests, &ctx, &set, today).unwrap(),
        time_averaging: set.time_averaging,
        budget: Budget::Count(1),
        stale: StaleThresholds::default(),
        default_hours: 1.0,
    };
    let (_dir, app) = app_with(rbt_state(inputs));
    let rank_of = |plan: &SelectionPlan, id: &str| {
        plan.entries
            .iter()
            .find(|e| e.ranked.test_id == id)
            .unwrap()
            .ranked
            .rank
    };
    let base: SelectionPlan = get_json(&app, "/tests/ranked").await;
    assert_eq!(rank_of(&base, "x"), 1);
    let (_, _, body) = call(&app, "POST", "/whatif", Some(json!({"overrides": {"crashes": 0.0}}))).await;
    let zeroed: SelectionPlan = serde_json::from_slice(&body).unwrap();
    assert!(rank_of(&zeroed, "x") >= rank_of(&base, "x"));
    assert_eq!(rank_of(&zeroed, "x"), 2);
    assert!(zeroed.entries[0].selected && zeroed.entries[0].ranked.test_id == "y");

    let (s, _, b) = call(
        &app,
        "POST",
        "/whatif",
        Some(json!({"overrides": {"crashes": 0.0, "churn": 0.0}})),
    )
    .await;
    assert_eq!(
        (s, error_code(&b).as_str()),
        (StatusCode::BAD_REQUEST, "risk.AllWeightsZero")
    );
}

#[tokio::test]
async fn whatif_on_five_thousand_items_is_fast() {
    let params = CatalogParams {
        tests: 5000,
        runs_per_test: 4,
        ..CatalogParams::default()
    };
    let cat = catalog(&params);
    let set = catalog_criteria();
    let registry = ExprRegistry::new();
    let ctx = CriteriaContext::new(&cat.runs, &[], &[], &[], &registry);
    let inputs = PlanInputs {
        items: compute_all(&cat.tests, &ctx, &set, params.today).unwrap(),
        time_averaging: set.time_averaging,
        budget: Budget::Count(500),
        stale: StaleThresholds::default(),
        default_hours: 1.0,
    };
    let (_dir, app) = app_with(rbt_state(inputs));
    // warm up once, then time the slowest of a few requests
    call(&app, "POST", "/whatif", Some(json!({}))).await;
    let mut slowest = Duration::ZERO;
    for w in [0.1, 0.4, 0.9] {
        let started = Instant::now();
        let (s, _, _) = call(&app, "POST", "/whatif", Some(json!({"overrides": {"usage": w}}))).await;
        slowest = slowest.max(started.elapsed());
        assert_eq!(s, StatusCode::OK);
    }
    assert!(slowest < Duration::from_millis(500), "{slowest:?}");
}
