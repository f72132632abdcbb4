mod support;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;

use chrono::{NaiveDate, TimeZone, Utc};
use qarisk::learn::{explain, GbmModel};
use qarisk::pipeline::collections::Collection;
use qarisk::pipeline::config::LinkHop;
use qarisk::pipeline::run::artifacts;
use qarisk::pipeline::store::{history_query, parse_log, summarize, RunOutcome, RunRange, RunStore, RunSummary};
use qarisk::pipeline::{link_collections, load_config, run_pipeline, ArtifactStore, FixedClock, Pipeline};
use qarisk::pipeline::{run::load_plan, Alert};
use serde_json::{json, Value};
use tempfile::TempDir;

/// Known digest of the fixture's selection plan.
const GOLDEN_RBT_PLAN_SHA256: &str = "8b9b21289562b96c4917a065279aac9e39ba194d063796f781c529c567a45edd";

fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    support::write_fixture(dir.path());
    dir
}

fn load(dir: &Path, file: &str) -> Pipeline {
    load_config(&dir.join(file)).unwrap()
}

fn day(d: u32, hour: u32) -> FixedClock {
    FixedClock(Utc.with_ymd_and_hms(2024, 6, d, hour, 0, 0).unwrap())
}

#[test]
fn fixture_runs_succeed_and_export_their_primary_artifact() {
    let dir = fixture();
    let art = dir.path().join("artifacts");
    let record = run_pipeline(&load(dir.path(), "pipeline.toml"), &support::clock(1), &art).unwrap();
    assert_eq!(record.status, RunOutcome::Succeeded, "{:?}", record.error);
    let store = ArtifactStore::new(&art);
    for (stage, name, export) in [
        ("selection", artifacts::PLAN_TSV, "exports/nightly_plan.tsv"),
        ("defects", artifacts::SCORES, "exports/nightly_scores.tsv"),
    ] {
        let a = record.artifact(stage, name).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(export)).unwrap(),
            store.read(&a.path).unwrap()
        );
    }
    for key in [
        "selection.selected_count",
        "selection.bugs_found_per_hour",
        "defects.macro_f1",
        "collections.automated_tests.rows",
    ] {
        assert!(record.metrics.contains_key(key), "{key}");
    }
}

#[test]
fn reruns_on_identical_inputs_are_byte_identical() {
    let (a, b) = (fixture(), fixture());
    let ra = run_pipeline(
        &load(a.path(), "pipeline.toml"),
        &support::clock(3),
        &a.path().join("art"),
    )
    .unwrap();
    let rb = run_pipeline(
        &load(b.path(), "pipeline.toml"),
        &support::clock(3),
        &b.path().join("art"),
    )
    .unwrap();
    assert_eq!(ra.artifacts, rb.artifacts);
    assert_eq!(ra.artifact_digest(), rb.artifact_digest());
    for export in ["exports/nightly_plan.tsv", "exports/nightly_scores.tsv"] {
        assert_eq!(
            std::fs::read(a.path().join(export)).unwrap(),
            std::fs::read(b.path().join(export)).unwrap()
        );
    }

    // a second run in the same store differs only in its report
    let again = run_pipeline(
        &load(a.path(), "pipeline.toml"),
        &support::clock(4),
        &a.path().join("art"),
    )
    .unwrap();
    let non_report = |r: &qarisk::pipeline::RunRecord| -> Vec<_> {
        r.artifacts.iter().filter(|e| e.stage != "report").cloned().collect()
    };
    assert_eq!(non_report(&ra), non_report(&again));
    assert_eq!(ra.input_digests, again.input_digests);
    assert_eq!(ra.config_digest, again.config_digest);
}

#[test]
fn fixture_plan_matches_golden_digest() {
    let dir = fixture();
    let record = run_pipeline(
        &load(dir.path(), "rbt.toml"),
        &support::clock(1),
        &dir.path().join("art"),
    )
    .unwrap();
    let sha = &record.artifact("selection", artifacts::PLAN_TSV).unwrap().sha256;
    assert_eq!(sha, GOLDEN_RBT_PLAN_SHA256);
}

#[test]
fn missing_source_fails_at_ingest() {
    let dir = fixture();
    std::fs::remove_file(dir.path().join("telemetry.csv")).unwrap();
    let art = dir.path().join("art");
    let record = run_pipeline(&load(dir.path(), "rbt.toml"), &support::clock(1), &art).unwrap();
    assert_eq!(record.status, RunOutcome::Failed);
    assert_eq!(record.failed_stage.as_deref(), Some("ingest"));
    assert_eq!(record.error.as_ref().unwrap().code, "pipeline.SourceUnreadable");
    assert!(record.artifacts.is_empty());
    assert!(!dir.path().join("exports/rbt_plan.tsv").exists());
    // the failure is still logged
    assert_eq!(RunStore::new(&art).records().unwrap(), vec![record]);
}

#[test]
fn config_errors_carry_codes() {
    let dir = fixture();
    let base = std::fs::read_to_string(dir.path().join("rbt.toml")).unwrap();
    let cases = [
        (
            base.replace("kind = \"rbt\"", "kind = \"magic\""),
            "pipeline.ParseError",
        ),
        (
            base.replace("template = \"summary\"", "template = \"fancy\""),
            "pipeline.DanglingReference",
        ),
        (
            base.replace("tests_from = \"automated_tests\"", "tests_from = \"nowhere\""),
            "pipeline.DanglingReference",
        ),
        (
            base.replace("budget = { count = 30 }", "budget = { count = 0 }"),
            "pipeline.InvalidConfig",
        ),
        (
            base.replace("name = \"rbt\"", "name = \"r b t\""),
            "pipeline.InvalidConfig",
        ),
    ];
    for (text, code) in cases {
        assert_ne!(text, base);
        std::fs::write(dir.path().join("bad.toml"), &text).unwrap();
        let err = load_config(&dir.path().join("bad.toml")).unwrap_err();
        assert_eq!(err.code(), code, "{err}");
    }
    let err = load_config(&dir.path().join("absent.toml")).unwrap_err();
    assert_eq!(err.code(), "pipeline.Io");
}

#[test]
fn parse_errors_point_at_the_offending_line() {
    let dir = fixture();
    let base = std::fs::read_to_string(dir.path().join("rbt.toml")).unwrap();
    let line = base.lines().position(|l| l.starts_with("kind = \"rbt\"")).unwrap() + 1;
    std::fs::write(dir.path().join("bad.toml"), base.replace("kind = \"rbt\"", "kind = 4")).unwrap();
    let err = load_config(&dir.path().join("bad.toml")).unwrap_err();
    assert!(err.to_string().contains(&format!("bad.toml:{line}:")), "{err}");
}

fn hop(field: &str, target: &str, target_field: Option<&str>) -> LinkHop {
    LinkHop {
        field: field.into(),
        target: target.into(),
        target_field: target_field.map(str::to_string),
    }
}

#[test]
fn bugs_join_telemetry_by_area() {
    let bugs = Collection::new(
        "bugs",
        vec![
            json!({"id": "QA-1", "area": "engine"}),
            json!({"id": "QA-2", "area": "ui"}),
            json!({"id": "QA-3", "area": "billing"}),
        ],
    );
    let telemetry = Collection::new(
        "telemetry",
        vec![
            json!({"area": "ui", "usage": 0.9}),
            json!({"area": "engine", "usage": 0.4}),
            json!({"area": "engine", "usage": 0.1}),
        ],
    );
    let all = BTreeMap::from([("telemetry".to_string(), telemetry)]);
    let view = link_collections(&bugs, &[hop("area", "telemetry", None)], &all).unwrap();
    // first matching row wins; unmatched rows stay with null
    assert_eq!(view.rows[0]["telemetry"], json!({"area": "engine", "usage": 0.4}));
    assert_eq!(view.rows[1]["telemetry"]["usage"], json!(0.9));
    assert_eq!(view.rows[2]["telemetry"], Value::Null);
    assert_eq!(view.misses, vec![1]);
    assert_eq!(view.rows[2]["id"], json!("QA-3"));
}

#[test]
fn two_hop_chain_equals_precomputed_single_hop() {
    let tests = Collection::new(
        "tests",
        (0..30)
            .map(|k| json!({"id": format!("T{k}"), "area": format!("a{}", k % 7)}))
            .collect(),
    );
    let areas = Collection::new(
        "areas",
        (0..6)
            .map(|k| json!({"name": format!("a{k}"), "team": format!("team{}", k % 4)}))
            .collect(),
    );
    let teams = Collection::new(
        "teams",
        (0..3)
            .map(|k| json!({"team": format!("team{k}"), "oncall": format!("p{k}")}))
            .collect(),
    );
    let mut all = BTreeMap::from([
        ("areas".to_string(), areas.clone()),
        ("teams".to_string(), teams.clone()),
    ]);
    let chain = [hop("area", "areas", Some("name")), hop("team", "teams", None)];
    let two = link_collections(&tests, &chain, &all).unwrap();

    // the same join with the second hop done up front
    let joined_areas = link_collections(&areas, &[hop("team", "teams", None)], &all).unwrap();
    all.insert("areas_teams".into(), Collection::new("areas_teams", joined_areas.rows));
    let one = link_collections(&tests, &[hop("area", "areas_teams", Some("name"))], &all).unwrap();

    for (a, b) in two.rows.iter().zip(&one.rows) {
        assert_eq!(
            a["teams"],
            b["areas_teams"].get("teams").cloned().unwrap_or(Value::Null)
        );
    }
    // a6 has no area row; team3 has no team row
    assert_eq!(two.misses, vec![4, 4]);
}

#[test]
fn unknown_link_fields_are_rejected() {
    let base = Collection::new("b", vec![json!({"x": 1})]);
    let all = BTreeMap::from([("t".to_string(), Collection::new("t", vec![json!({"y": 1})]))]);
    let err = link_collections(&base, &[hop("x", "t", None)], &all).unwrap_err();
    assert_eq!(err.code(), "pipeline.UnknownField");
    let err = link_collections(&base, &[hop("x", "nope", None)], &all).unwrap_err();
    assert_eq!(err.code(), "pipeline.UnknownCollection");
}

fn report_of(art: &Path, record: &qarisk::pipeline::RunRecord) -> String {
    ArtifactStore::new(art)
        .read_string(&record.artifact("report", artifacts::REPORT).unwrap().path)
        .unwrap()
}

#[test]
fn report_lists_top_tests_and_alert_explanations() {
    let dir = fixture();
    let art = dir.path().join("art");
    let record = run_pipeline(&load(dir.path(), "pipeline.toml"), &support::clock(1), &art).unwrap();
    let report = report_of(&art, &record);
    assert!(report.contains("no prior run"));

    let store = ArtifactStore::new(&art);
    let plan = load_plan(&store, &record, "selection").unwrap();
    for e in plan.entries.iter().take(10) {
        let r = &e.ranked;
        let row = format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.3} |",
            r.rank, r.test_id, r.r, r.p, r.i, r.t
        );
        assert!(report.contains(&row), "missing {row}");
    }
    let eleventh = &plan.entries[10].ranked;
    assert!(!report.contains(&format!("| {} | {} |", eleventh.rank, eleventh.test_id)));

    let model = GbmModel::from_json(
        &store
            .read_string(&record.artifact("defects", artifacts::MODEL).unwrap().path)
            .unwrap(),
    )
    .unwrap();
    let alerts: Vec<Alert> = serde_json::from_slice(
        &store
            .read(&record.artifact("defects", artifacts::ALERTS).unwrap().path)
            .unwrap(),
    )
    .unwrap();
    assert!(!alerts.is_empty());
    let features = store
        .read_string(&record.artifact("defects", artifacts::FEATURES).unwrap().path)
        .unwrap();
    let table = qarisk::features::FeatureTable::from_csv(&features).unwrap();
    for a in &alerts {
        let row = table.rows.iter().find(|r| r.commit_id == a.commit_id).unwrap();
        let ex = explain(&model, &row.values).unwrap();
        let expected: Vec<&str> = ex.top(3).into_iter().map(|c| c.feature.as_str()).collect();
        let got: Vec<&str> = a.top_features.iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(got, expected);
        assert!(report.contains(&format!("`{}` score {:.4}", a.commit_id, a.score)));
        for f in &a.top_features {
            assert!(report.contains(&format!("   - {} = {}: {:+.4}", f.feature, f.value, f.contribution)));
        }
    }

    let second = run_pipeline(&load(dir.path(), "pipeline.toml"), &support::clock(2), &art).unwrap();
    let report = report_of(&art, &second);
    assert!(!report.contains("no prior run"));
    assert!(report.contains(&format!("Compared with {}.", record.run_id)));
}

#[test]
fn history_is_time_ordered_and_filterable() {
    let dir = fixture();
    let art = dir.path().join("art");
    let p = load(dir.path(), "rbt.toml");
    // appended out of time order on purpose
    for d in [5, 3, 4] {
        run_pipeline(&p, &day(d, 9), &art).unwrap();
    }
    let store = RunStore::new(&art);
    let all = history_query(&store, "rbt", None).unwrap();
    let days: Vec<u32> = all.iter().map(|s| chrono::Datelike::day(&s.started_at)).collect();
    assert_eq!(days, vec![3, 4, 5]);
    let ids: Vec<&str> = all.iter().map(|s| s.run_id.as_str()).collect();
    assert_eq!(ids, vec!["rbt-000002", "rbt-000003", "rbt-000001"]);
    for s in &all {
        assert_eq!(s.status, RunOutcome::Succeeded);
        for key in [
            "selection.bugs_found_per_hour",
            "selection.selected_count",
            "selection.stale_count",
        ] {
            assert!(s.metrics.contains_key(key), "{key}");
        }
    }
    let range = RunRange {
        from: NaiveDate::from_ymd_opt(2024, 6, 4),
        to: None,
    };
    let filtered = history_query(&store, "rbt", Some(range)).unwrap();
    assert_eq!(filtered.len(), 2);
    assert_eq!(filtered, all[1..].to_vec());

    // replaying the raw log gives the same answer
    let log = std::fs::read_to_string(store.path()).unwrap();
    assert_eq!(summarize(&parse_log(&log).unwrap(), "rbt", None).unwrap(), all);
    assert_eq!(
        history_query(&store, "other", None).unwrap_err().code(),
        "pipeline.UnknownPipeline"
    );
}

#[test]
fn unreachable_webhook_is_a_warning() {
    let dir = fixture();
    let text = std::fs::read_to_string(dir.path().join("rbt.toml")).unwrap().replace(
        "{ report = { template = \"summary\" } }]",
        "{ report = { template = \"summary\" } }, { webhook = { url = \"http://127.0.0.1:9/hook\" } }]",
    );
    std::fs::write(dir.path().join("hook.toml"), text).unwrap();
    let record = run_pipeline(
        &load(dir.path(), "hook.toml"),
        &support::clock(1),
        &dir.path().join("art"),
    )
    .unwrap();
    assert_eq!(record.status, RunOutcome::Succeeded);
    assert_eq!(record.warnings.iter().filter(|w| w.starts_with("webhook ")).count(), 1);
}

/// Accepts one HTTP request and returns its body.
fn serve_once(listener: TcpListener) -> String {
    let (mut stream, _) = listener.accept().unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    stream
        .write_all(b"HTTP/1.1 200 OK\r\ncontent-length: 0\r\nconnection: close\r\n\r\n")
        .unwrap();
    String::from_utf8(body).unwrap()
}

#[test]
fn webhook_receives_the_run_summary() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/hook", listener.local_addr().unwrap());
    let server = std::thread::spawn(move || serve_once(listener));
    let dir = fixture();
    let text = std::fs::read_to_string(dir.path().join("rbt.toml")).unwrap().replace(
        "{ report = { template = \"summary\" } }]",
        &format!("{{ webhook = {{ url = \"{url}\" }} }}]"),
    );
    std::fs::write(dir.path().join("hook.toml"), text).unwrap();
    let record = run_pipeline(
        &load(dir.path(), "hook.toml"),
        &support::clock(1),
        &dir.path().join("art"),
    )
    .unwrap();
    assert!(record.warnings.is_empty(), "{:?}", record.warnings);
    let body: RunSummary = serde_json::from_str(&server.join().unwrap()).unwrap();
    assert_eq!(body, record.summary());
}

#[test]
fn dry_runs_match_real_runs_without_writing() {
    let dir = fixture();
    let p = load(dir.path(), "pipeline.toml");
    let dry = qarisk::pipeline::dry_run(&p, NaiveDate::from_ymd_opt(2030, 1, 1).unwrap()).unwrap();
    assert!(!dir.path().join("exports").exists());
    let art = dir.path().join("art");
    let record = run_pipeline(&p, &support::clock(1), &art).unwrap();
    let store = ArtifactStore::new(&art);
    let real: Vec<_> = record.artifacts.iter().filter(|e| e.stage != "report").collect();
    assert_eq!(real.len(), dry.artifacts.len());
    for e in real {
        assert_eq!(
            dry.artifact(&e.stage, &e.name).unwrap(),
            store.read(&e.artifact.path).unwrap().as_slice()
        );
    }
    assert_eq!(dry.metrics, record.metrics);
    assert_eq!(dry.plan("selection"), load_plan(&store, &record, "selection"));
}

#[test]
fn seed_override_reaches_training_and_the_digest() {
    let dir = fixture();
    let p = load(dir.path(), "pipeline.toml");
    let seeded = p.clone().with_seed(8);
    let seeds: Vec<u64> = seeded
        .settings
        .iter()
        .filter_map(|s| match s {
            qarisk::pipeline::StageSettings::DefectPrevention(d) => Some(d.train.seed),
            _ => None,
        })
        .collect();
    assert_eq!(seeds, vec![8]);
    assert_eq!(seeded.config.seed, Some(8));
    assert_ne!(seeded.source_text, p.source_text);
}
