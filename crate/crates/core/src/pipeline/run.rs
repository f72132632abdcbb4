//! Executes a validated pipeline: ingest, collections, transforms, stages,
//! outputs, run record.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::expr::{self, Bindings};
use crate::features::{FeatureConfig, FeatureTable};
use crate::learn::{self, classify, evaluate, explain, time_ordered_split, EvalReport, TrainSet, Verdict};
use crate::model::{Dataset, TestCase, ValidationContext};
use crate::risk::{compute_all, AreaMap, CriteriaContext};
use crate::select::{PlanInputs, SelectionPlan};
use crate::szz::{label_commits, RepoModel, SzzConfig};

use super::adapters::ingest_text;
use super::collections::{filter_rows, link_collections, record_collections, Collection};
use super::config::{DefectSettings, OutputConfig, Pipeline, RbtSettings, StageSettings};
use super::report::render_report;
use super::store::{
    next_run_id, sha256_hex, write_atomic, ArtifactEntry, ArtifactRef, ArtifactStore, Clock, RunFailure, RunOutcome,
    RunRecord, RunStore, StoreError, RUN_RECORD_SCHEMA_VERSION,
};

/// Pseudo-stage names used in run records.
pub const INGEST_STAGE: &str = "ingest";
pub const COLLECTIONS_STAGE: &str = "collections";
pub const REPORT_STAGE: &str = "report";

/// Artifact names written by each stage kind.
pub mod artifacts {
    pub const PLAN_TSV: &str = "plan.tsv";
    pub const PLAN_JSON: &str = "plan.json";
    pub const PLAN_INPUTS: &str = "plan_inputs.json";
    pub const LABELS: &str = "labels.tsv";
    pub const SUSPECTS: &str = "suspects.tsv";
    pub const FEATURES: &str = "features.csv";
    pub const MODEL: &str = "model.json";
    pub const METRICS: &str = "metrics.json";
    pub const SCORES: &str = "scores.tsv";
    pub const ALERTS: &str = "alerts.json";
    pub const REPORT: &str = "report.md";
}

/// Webhook attempts and the delay before the second one; each retry doubles
/// the delay.
pub const WEBHOOK_ATTEMPTS: u32 = 3;
pub const WEBHOOK_BASE_DELAY: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq)]
struct StageFailure {
    code: String,
    message: String,
}

fn fail(code: &str, e: impl std::fmt::Display) -> StageFailure {
    StageFailure {
        code: code.to_string(),
        message: e.to_string(),
    }
}

/// Errors that carry a module-qualified code.
pub trait Coded: std::fmt::Display {
    fn code(&self) -> &'static str;
}

macro_rules! impl_coded {
    ($($t:ty),*) => {
        $(impl Coded for $t {
            fn code(&self) -> &'static str {
                <$t>::code(self)
            }
        })*
    };
}

impl_coded!(
    crate::model::ValidationError,
    crate::risk::RiskError,
    crate::select::SelectError,
    crate::szz::SzzError,
    crate::features::FeatureError,
    crate::learn::LearnError,
    super::adapters::IngestError,
    super::collections::LinkError
);

fn coded<E: Coded>(e: E) -> StageFailure {
    fail(e.code(), &e)
}

/// The stage-independent part of the run, built up as stages complete.
struct Run<'a> {
    pipeline: &'a Pipeline,
    /// `None` keeps artifacts in `memory` and skips exports.
    store: Option<ArtifactStore>,
    memory: BTreeMap<String, Vec<u8>>,
    today: NaiveDate,
    artifacts: Vec<ArtifactEntry>,
    metrics: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

impl Run<'_> {
    fn write(&mut self, stage: &str, name: &str, bytes: &[u8]) -> Result<(), StageFailure> {
        let rel = format!("{}/{stage}/{name}", self.pipeline.name());
        let artifact = match &self.store {
            Some(store) => store
                .write(&rel, bytes)
                .map_err(|e| fail("pipeline.ArtifactWrite", e))?,
            None => {
                self.memory.insert(rel.clone(), bytes.to_vec());
                ArtifactRef {
                    path: rel,
                    sha256: sha256_hex(bytes),
                    bytes: bytes.len() as u64,
                }
            }
        };
        self.artifacts.push(ArtifactEntry {
            stage: stage.to_string(),
            name: name.to_string(),
            artifact,
        });
        Ok(())
    }

    fn read(&self, rel: &str) -> std::io::Result<Vec<u8>> {
        match &self.store {
            Some(store) => store.read(rel),
            None => self
                .memory
                .get(rel)
                .cloned()
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, rel.to_string())),
        }
    }

    fn metric(&mut self, stage: &str, name: &str, value: f64) {
        self.metrics.insert(format!("{stage}.{name}"), value);
    }
}

/// Everything one stage hands to later ones.
#[derive(Debug, Clone, Default)]
struct StageProduct {
    /// Area → value, for `feed` outputs.
    feed: BTreeMap<String, f64>,
    /// Artifact copied by `export` outputs.
    primary: Option<&'static str>,
}

/// Runs `pipeline`, writing artifacts under `artifact_dir` and appending
/// the run record to its run log. Stage failures produce a failed record;
/// only run-log failures are returned as errors.
pub fn run_pipeline(pipeline: &Pipeline, clock: &dyn Clock, artifact_dir: &Path) -> Result<RunRecord, StoreError> {
    let runs = RunStore::new(artifact_dir);
    let history = runs.records()?;
    let previous = history
        .iter()
        .rev()
        .find(|r| r.pipeline == pipeline.name() && r.status == RunOutcome::Succeeded)
        .cloned();
    let started_at = clock.now();
    let mut record = RunRecord {
        schema_version: RUN_RECORD_SCHEMA_VERSION,
        run_id: next_run_id(&history, pipeline.name()),
        pipeline: pipeline.name().to_string(),
        started_at,
        finished_at: started_at,
        status: RunOutcome::Succeeded,
        failed_stage: None,
        error: None,
        config_digest: sha256_hex(pipeline.source_text.as_bytes()),
        input_digests: BTreeMap::new(),
        artifacts: Vec::new(),
        metrics: BTreeMap::new(),
        warnings: Vec::new(),
    };
    let mut run = Run {
        pipeline,
        store: Some(ArtifactStore::new(artifact_dir)),
        memory: BTreeMap::new(),
        today: pipeline.config.today.unwrap_or_else(|| started_at.date_naive()),
        artifacts: Vec::new(),
        metrics: BTreeMap::new(),
        warnings: Vec::new(),
    };

    let outcome = execute(&mut run, &mut record.input_digests);
    if let Err((stage, failure)) = &outcome {
        record.status = RunOutcome::Failed;
        record.failed_stage = Some(stage.clone());
        record.error = Some(RunFailure {
            code: failure.code.clone(),
            message: failure.message.clone(),
        });
    }
    record.artifacts = run.artifacts;
    record.metrics = run.metrics;
    record.warnings = run.warnings;

    if outcome.is_ok() {
        let store = run.store.as_ref().expect("real runs have a store");
        finish_outputs(pipeline, store, &mut record, previous.as_ref());
    }
    record.finished_at = clock.now();
    post_webhooks(pipeline, &mut record);
    runs.append(&mut record)?;
    Ok(record)
}

/// A stage failure with its module-qualified code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("stage `{stage}`: {message}")]
pub struct StageError {
    pub stage: String,
    pub code: String,
    pub message: String,
}

/// What a run would produce, held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DryRun {
    pub pipeline: String,
    /// Keyed by the store-relative path a real run would use.
    pub artifacts: BTreeMap<String, Vec<u8>>,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl DryRun {
    pub fn artifact(&self, stage: &str, name: &str) -> Option<&[u8]> {
        self.artifacts
            .get(&format!("{}/{stage}/{name}", self.pipeline))
            .map(Vec::as_slice)
    }

    pub fn plan(&self, stage: &str) -> Option<SelectionPlan> {
        serde_json::from_slice(self.artifact(stage, artifacts::PLAN_JSON)?).ok()
    }
}

/// Runs every stage without touching the filesystem beyond reading sources:
/// no artifacts, exports, reports, webhooks or run record. The config's
/// `today` wins over `fallback_today`.
pub fn dry_run(pipeline: &Pipeline, fallback_today: NaiveDate) -> Result<DryRun, StageError> {
    let mut run = Run {
        pipeline,
        store: None,
        memory: BTreeMap::new(),
        today: pipeline.config.today.unwrap_or(fallback_today),
        artifacts: Vec::new(),
        metrics: BTreeMap::new(),
        warnings: Vec::new(),
    };
    execute(&mut run, &mut BTreeMap::new()).map_err(|(stage, f)| StageError {
        stage,
        code: f.code,
        message: f.message,
    })?;
    Ok(DryRun {
        pipeline: pipeline.name().to_string(),
        artifacts: run.memory,
        metrics: run.metrics,
        warnings: run.warnings,
    })
}

type StageResult<T> = Result<T, (String, StageFailure)>;

fn at<T>(stage: &str, r: Result<T, StageFailure>) -> StageResult<T> {
    r.map_err(|f| (stage.to_string(), f))
}

fn execute(run: &mut Run<'_>, digests: &mut BTreeMap<String, String>) -> StageResult<()> {
    let pipeline = run.pipeline;
    let ds = at(INGEST_STAGE, ingest(pipeline, run.today, digests))?;
    run.metric(INGEST_STAGE, "tests", ds.tests.len() as f64);
    run.metric(INGEST_STAGE, "runs", ds.runs.len() as f64);
    run.metric(INGEST_STAGE, "bugs", ds.bugs.len() as f64);
    run.metric(INGEST_STAGE, "commits", ds.commits.len() as f64);
    run.metric(INGEST_STAGE, "telemetry", ds.telemetry.len() as f64);

    let collections = at(COLLECTIONS_STAGE, build_collections(run, &ds))?;

    let mut products: BTreeMap<String, StageProduct> = BTreeMap::new();
    for &k in &pipeline.order {
        let stage = &pipeline.config.stages[k];
        let feeds: BTreeMap<String, BTreeMap<String, f64>> = pipeline
            .config
            .stages
            .iter()
            .filter(|s| s.feeds().any(|to| to == stage.name))
            .filter_map(|s| products.get(&s.name).map(|p| (s.name.clone(), p.feed.clone())))
            .collect();
        let product = match &pipeline.settings[k] {
            StageSettings::Rbt(s) => at(&stage.name, rbt_stage(run, &stage.name, s, &ds, &collections, feeds))?,
            StageSettings::DefectPrevention(s) => at(&stage.name, defect_stage(run, &stage.name, s, &ds))?,
        };
        for o in stage.outputs.iter().filter(|_| run.store.is_some()) {
            if let (OutputConfig::Export { path }, Some(name)) = (o, product.primary) {
                let rel = format!("{}/{}/{name}", pipeline.name(), stage.name);
                let bytes = run
                    .read(&rel)
                    .map_err(|e| (stage.name.clone(), fail("pipeline.Export", e)))?;
                write_atomic(&pipeline.resolve(path), &bytes, false).map_err(|e| {
                    (
                        stage.name.clone(),
                        fail("pipeline.Export", format!("{}: {e}", path.display())),
                    )
                })?;
            }
        }
        products.insert(stage.name.clone(), product);
    }
    Ok(())
}

fn ingest(
    pipeline: &Pipeline,
    today: NaiveDate,
    digests: &mut BTreeMap<String, String>,
) -> Result<Dataset, StageFailure> {
    let ctx = ValidationContext::new(today);
    let mut ds = Dataset::default();
    for src in &pipeline.config.sources {
        let path = pipeline.resolve(&src.path);
        let bytes = std::fs::read(&path).map_err(|e| {
            fail(
                "pipeline.SourceUnreadable",
                format!("source `{}` ({}): {e}", src.id, path.display()),
            )
        })?;
        digests.insert(src.id.clone(), sha256_hex(&bytes));
        let text = String::from_utf8(bytes)
            .map_err(|_| fail("pipeline.MalformedSource", format!("source `{}` is not UTF-8", src.id)))?;
        let part = ingest_text(src.adapter, &path.display().to_string(), &text, &ctx).map_err(coded)?;
        ds.tests.extend(part.tests);
        ds.runs.extend(part.runs);
        ds.bugs.extend(part.bugs);
        ds.commits.extend(part.commits);
        ds.telemetry.extend(part.telemetry);
    }
    ds.check_unique_ids().map_err(coded)?;
    ds.commits.sort_by_key(|c| c.timestamp);
    Ok(ds)
}

fn numeric_bindings(row: &serde_json::Value) -> Bindings {
    let mut b = Bindings::new();
    if let Some(obj) = row.as_object() {
        // nested objects first so top-level fields win on a name clash
        for v in obj.values() {
            if let Some(inner) = v.as_object() {
                for (k, x) in inner {
                    if let Some(x) = x.as_f64() {
                        b.insert(k.clone(), x);
                    }
                }
            }
        }
        for (k, v) in obj {
            if let Some(x) = v.as_f64() {
                b.insert(k.clone(), x);
            }
        }
    }
    b
}

fn build_collections(run: &mut Run<'_>, ds: &Dataset) -> Result<BTreeMap<String, Collection>, StageFailure> {
    let pipeline = run.pipeline;
    let mut all = record_collections(ds);
    for c in &pipeline.config.collections {
        let base = Collection::new(c.name.clone(), filter_rows(&all[&c.from].rows, &c.filter));
        let rows = if c.links.is_empty() {
            base.rows
        } else {
            let view = link_collections(&base, &c.links, &all).map_err(coded)?;
            run.metric(
                COLLECTIONS_STAGE,
                &format!("{}.misses", c.name),
                view.total_misses() as f64,
            );
            view.rows
        };
        all.insert(c.name.clone(), Collection::new(c.name.clone(), rows));
    }
    for t in &pipeline.config.transforms {
        let tree = pipeline.registry.get(&t.tree).expect("validated at load");
        let coll = all.get_mut(&t.collection).expect("validated at load");
        for row in &mut coll.rows {
            let v = expr::eval(tree, &numeric_bindings(row), &pipeline.registry)
                .map_err(|e| fail(e.code(), format!("transform `{}` on `{}`: {e}", t.tree, t.collection)))?;
            if let Some(obj) = row.as_object_mut() {
                obj.insert(t.output.clone(), serde_json::json!(v));
            }
        }
    }
    for c in &pipeline.config.collections {
        let coll = &all[&c.name];
        run.metric(COLLECTIONS_STAGE, &format!("{}.rows", c.name), coll.rows.len() as f64);
        run.write(
            COLLECTIONS_STAGE,
            &format!("{}.ndjson", c.name),
            coll.to_ndjson().as_bytes(),
        )?;
    }
    Ok(all)
}

fn to_pretty_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifacts serialize");
    s.push('\n');
    s.into_bytes()
}

/// Tests for an rbt stage: either all ingested tests, or rows of a
/// collection with transform outputs merged into their manual inputs.
fn stage_tests(
    pipeline: &Pipeline,
    s: &RbtSettings,
    ds: &Dataset,
    collections: &BTreeMap<String, Collection>,
) -> Result<Vec<TestCase>, StageFailure> {
    let Some(name) = &s.tests_from else {
        return Ok(ds.tests.clone());
    };
    let outputs: Vec<&str> = pipeline
        .config
        .transforms
        .iter()
        .filter(|t| &t.collection == name)
        .map(|t| t.output.as_str())
        .collect();
    collections[name]
        .rows
        .iter()
        .map(|row| {
            let mut test: TestCase = serde_json::from_value(row.clone()).map_err(|e| {
                fail(
                    "pipeline.MalformedRow",
                    format!("collection `{name}` row is not a test: {e}"),
                )
            })?;
            for o in &outputs {
                if let Some(v) = row.get(*o).and_then(|v| v.as_f64()) {
                    test.manual.insert(o.to_string(), v);
                }
            }
            Ok(test)
        })
        .collect()
}

/// Distinct bugs found per hour of testing over the last 30 days.
pub fn bugs_found_per_hour(ds: &Dataset, today: NaiveDate) -> f64 {
    let from = today - chrono::Days::new(30);
    let recent = ds.runs.iter().filter(|r| r.tested_on > from && r.tested_on <= today);
    let mut hours = 0.0;
    let mut bugs = BTreeSet::new();
    for r in recent {
        hours += r.duration;
        bugs.extend(r.found_bug_ids.iter().map(String::as_str));
    }
    if hours > 0.0 {
        bugs.len() as f64 / hours
    } else {
        0.0
    }
}

fn rbt_stage(
    run: &mut Run<'_>,
    stage: &str,
    s: &RbtSettings,
    ds: &Dataset,
    collections: &BTreeMap<String, Collection>,
    feeds: BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<StageProduct, StageFailure> {
    let pipeline = run.pipeline;
    let tests = stage_tests(pipeline, s, ds, collections)?;
    let ctx = CriteriaContext::new(&ds.runs, &ds.bugs, &ds.commits, &ds.telemetry, &pipeline.registry)
        .with_areas(AreaMap {
            prefixes: pipeline.config.areas.clone(),
        })
        .with_feeds(feeds);
    // stamped with the reference date, not the wall clock, so reruns match
    let items = compute_all(&tests, &ctx, &s.criteria, run.today).map_err(coded)?;
    let inputs = PlanInputs {
        items,
        time_averaging: s.criteria.time_averaging,
        budget: s.budget,
        stale: s.stale,
        default_hours: s.default_hours,
    };
    let plan = inputs.plan(&BTreeMap::new(), None).map_err(coded)?;

    run.write(stage, artifacts::PLAN_TSV, plan.to_tsv().as_bytes())?;
    run.write(stage, artifacts::PLAN_JSON, &to_pretty_json(&plan))?;
    run.write(stage, artifacts::PLAN_INPUTS, &to_pretty_json(&inputs))?;

    let n = plan.entries.len() as f64;
    run.metric(stage, "tests_ranked", n);
    run.metric(stage, "selected_count", plan.selected_count() as f64);
    run.metric(stage, "selected_hours", plan.selected_hours());
    run.metric(stage, "stale_count", plan.stale_count() as f64);
    run.metric(
        stage,
        "mean_r",
        plan.entries.iter().map(|e| e.ranked.r).sum::<f64>() / n,
    );
    run.metric(stage, "bugs_found_per_hour", bugs_found_per_hour(ds, run.today));

    let area_of: BTreeMap<&str, &str> = inputs
        .items
        .iter()
        .map(|i| (i.item_id.as_str(), i.area.as_str()))
        .collect();
    let mut by_area: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in &plan.entries {
        let slot = by_area
            .entry(area_of[e.ranked.test_id.as_str()].to_string())
            .or_default();
        slot.0 += e.ranked.r / 100.0;
        slot.1 += 1;
    }
    Ok(StageProduct {
        feed: by_area.into_iter().map(|(a, (sum, k))| (a, sum / k as f64)).collect(),
        primary: Some(artifacts::PLAN_TSV),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertFeature {
    pub feature: String,
    pub value: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub commit_id: String,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub score: f64,
    pub raw: f64,
    pub top_features: Vec<AlertFeature>,
}

/// Contents of a defect stage's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectMetrics {
    pub threshold: f64,
    pub top_features: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_positives: usize,
    /// Held-out evaluation on the latest commits; absent without a test split.
    pub evaluation: Option<EvalReport>,
}

fn defect_stage(
    run: &mut Run<'_>,
    stage: &str,
    s: &DefectSettings,
    ds: &Dataset,
) -> Result<StageProduct, StageFailure> {
    let pipeline = run.pipeline;
    let repo = RepoModel::build(ds.commits.clone()).map_err(coded)?;
    let outcome = label_commits(
        &repo,
        &ds.bugs,
        SzzConfig {
            suspect_partial_fixes: s.suspect_partial_fixes,
        },
    )
    .map_err(coded)?;
    let table = FeatureTable::extract(
        &repo,
        FeatureConfig {
            complexity_threshold: s.complexity_threshold,
        },
    )
    .map_err(coded)?
    .with_labels(&outcome.inducing_ids());
    let set = TrainSet::from_table(&table).map_err(coded)?;
    let timestamps: Vec<DateTime<Utc>> = table.rows.iter().map(|r| r.timestamp).collect();
    let (train_idx, test_idx) = time_ordered_split(&timestamps, s.test_fraction);
    let train_set = set.subset(&train_idx);
    let model = learn::train(&train_set, &s.train).map_err(coded)?;
    let evaluation = if test_idx.is_empty() {
        None
    } else {
        Some(evaluate(&model, &set.subset(&test_idx), s.threshold).map_err(coded)?)
    };

    let mut scores_tsv = String::from("commit_id\tscore\talert\tlabel\n");
    let mut alerts = Vec::new();
    let mut scores = Vec::with_capacity(set.len());
    for (k, row) in table.rows.iter().enumerate() {
        let score = model.predict_proba(&set.x[k]).map_err(coded)?;
        let alert = classify(score, s.threshold).map_err(coded)? == Verdict::Alert;
        scores_tsv.push_str(&format!("{}\t{score}\t{alert}\t{}\n", row.commit_id, set.y[k]));
        scores.push(score);
        if alert {
            let ex = explain(&model, &set.x[k]).map_err(coded)?;
            alerts.push(Alert {
                commit_id: row.commit_id.clone(),
                author: row.author.clone(),
                timestamp: row.timestamp,
                score,
                raw: ex.raw,
                top_features: ex
                    .top(s.top_features)
                    .into_iter()
                    .map(|a| AlertFeature {
                        feature: a.feature.clone(),
                        value: a.value,
                        contribution: a.contribution,
                    })
                    .collect(),
            });
        }
    }
    // highest risk first; stable, so equal scores keep commit order
    alerts.sort_by(|a, b| b.score.total_cmp(&a.score));

    let metrics = DefectMetrics {
        threshold: s.threshold,
        top_features: s.top_features,
        train_rows: train_idx.len(),
        test_rows: test_idx.len(),
        train_positives: train_set.y.iter().filter(|y| **y).count(),
        evaluation,
    };
    let features_csv = table.to_csv().map_err(coded)?;
    run.write(stage, artifacts::LABELS, outcome.labels_tsv().as_bytes())?;
    run.write(stage, artifacts::SUSPECTS, outcome.suspects_tsv().as_bytes())?;
    run.write(stage, artifacts::FEATURES, features_csv.as_bytes())?;
    run.write(stage, artifacts::MODEL, model.to_json().as_bytes())?;
    run.write(stage, artifacts::METRICS, &to_pretty_json(&metrics))?;
    run.write(stage, artifacts::SCORES, scores_tsv.as_bytes())?;
    run.write(stage, artifacts::ALERTS, &to_pretty_json(&alerts))?;

    run.metric(stage, "commits", table.rows.len() as f64);
    run.metric(stage, "fix_links", outcome.links.len() as f64);
    run.metric(stage, "skipped_bugs", outcome.skipped.len() as f64);
    run.metric(stage, "bug_inducing", outcome.labels.len() as f64);
    run.metric(stage, "suspects", outcome.suspects.len() as f64);
    run.metric(stage, "alerts", alerts.len() as f64);
    run.metric(
        stage,
        "feature_warnings",
        table.rows.iter().map(|r| r.warnings.len()).sum::<usize>() as f64,
    );
    if let Some(ev) = &metrics.evaluation {
        run.metric(stage, "macro_f1", ev.macro_f1);
        run.metric(stage, "macro_precision", ev.macro_precision);
        run.metric(stage, "macro_recall", ev.macro_recall);
        run.metric(stage, "bug_inducing_precision", ev.positive.precision);
        run.metric(stage, "bug_inducing_recall", ev.positive.recall);
        if let Some(auc) = ev.roc_auc {
            run.metric(stage, "roc_auc", auc);
        }
    }
    for w in table
        .rows
        .iter()
        .flat_map(|r| r.warnings.iter().map(move |w| (r, w)))
        .take(20)
    {
        run.warnings.push(format!("{stage}: {}: {}", w.0.commit_id, w.1));
    }

    let areas = AreaMap {
        prefixes: pipeline.config.areas.clone(),
    };
    let mut names: BTreeSet<&str> = pipeline.config.areas.keys().map(String::as_str).collect();
    names.extend(ds.tests.iter().map(|t| t.area.as_str()));
    names.extend(ds.bugs.iter().map(|b| b.area.as_str()));
    let mut feed = BTreeMap::new();
    for area in names {
        let touching: Vec<f64> = repo
            .commits()
            .iter()
            .zip(&scores)
            .filter(|(c, _)| areas.commit_touches(c, area))
            .map(|(_, s)| *s)
            .collect();
        if !touching.is_empty() {
            feed.insert(area.to_string(), touching.iter().sum::<f64>() / touching.len() as f64);
        }
    }
    Ok(StageProduct {
        feed,
        primary: Some(artifacts::SCORES),
    })
}

/// Reads back a stage's selection plan.
pub fn load_plan(store: &ArtifactStore, record: &RunRecord, stage: &str) -> Option<SelectionPlan> {
    let a = record.artifact(stage, artifacts::PLAN_JSON)?;
    serde_json::from_slice(&store.read(&a.path).ok()?).ok()
}

fn finish_outputs(pipeline: &Pipeline, store: &ArtifactStore, record: &mut RunRecord, previous: Option<&RunRecord>) {
    let templates: BTreeSet<&str> = pipeline
        .config
        .stages
        .iter()
        .flat_map(|s| &s.outputs)
        .filter_map(|o| match o {
            OutputConfig::Report { template } => Some(template.as_str()),
            _ => None,
        })
        .collect();
    for template in templates {
        let name = if template == "summary" {
            artifacts::REPORT.to_string()
        } else {
            format!("report-{template}.md")
        };
        let written = render_report(store, record, previous, template)
            .map_err(|e| e.to_string())
            .and_then(|doc| {
                store
                    .write(&format!("{}/{REPORT_STAGE}/{name}", pipeline.name()), doc.as_bytes())
                    .map_err(|e| e.to_string())
            });
        match written {
            Ok(artifact) => record.artifacts.push(ArtifactEntry {
                stage: REPORT_STAGE.into(),
                name,
                artifact,
            }),
            Err(e) => record.warnings.push(format!("report `{template}`: {e}")),
        }
    }
}

fn post_webhooks(pipeline: &Pipeline, record: &mut RunRecord) {
    let urls: Vec<&str> = pipeline
        .config
        .stages
        .iter()
        .flat_map(|s| &s.outputs)
        .filter_map(|o| match o {
            OutputConfig::Webhook { url } => Some(url.as_str()),
            _ => None,
        })
        .collect();
    if urls.is_empty() {
        return;
    }
    let body = serde_json::to_string(&record.summary()).expect("summaries serialize");
    for url in urls {
        if let Err(e) = post_with_retry(url, &body, WEBHOOK_ATTEMPTS, WEBHOOK_BASE_DELAY) {
            record.warnings.push(format!("webhook {url}: {e}"));
        }
    }
}

/// POSTs a JSON body, retrying with exponential backoff. Returns the number
/// of attempts used.
pub fn post_with_retry(url: &str, body: &str, attempts: u32, base_delay: Duration) -> Result<u32, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .build()
        .into();
    let mut delay = base_delay;
    let mut last = String::new();
    for attempt in 1..=attempts.max(1) {
        match agent.post(url).header("content-type", "application/json").send(body) {
            Ok(_) => return Ok(attempt),
            Err(e) => last = e.to_string(),
        }
        if attempt < attempts {
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
    Err(format!("failed after {attempts} attempts: {last}"))
}
