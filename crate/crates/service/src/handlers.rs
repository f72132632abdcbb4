use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue};
use axum::Json;
use chrono::NaiveDate;
use qarisk::learn::{classify, explain, Explanation, FeatureAttribution, Verdict};
use qarisk::pipeline::{history_query, DefectState, RbtState, RunRange, RunStore, RunSummary};
use qarisk::risk::{CriterionKind, TimeAveraging};
use qarisk::select::{Budget, SelectionPlan};
use serde::{Deserialize, Serialize};

use crate::{ApiError, AppState, API_SCHEMA_VERSION};

/// Set to `true` on responses that are computed, not persisted.
pub const EPHEMERAL_HEADER: &str = "x-qarisk-ephemeral";
/// The run whose artifacts a response was computed from.
pub const RUN_HEADER: &str = "x-qarisk-run";

fn run_headers(run_id: &str, ephemeral: bool) -> HeaderMap {
    let mut h = HeaderMap::new();
    if let Ok(v) = HeaderValue::from_str(run_id) {
        h.insert(RUN_HEADER, v);
    }
    if ephemeral {
        h.insert(EPHEMERAL_HEADER, HeaderValue::from_static("true"));
    }
    h
}

fn rbt(state: &AppState) -> Result<Arc<qarisk::pipeline::ServingState>, ApiError> {
    let snap = state.snapshot();
    if snap.rbt.is_none() {
        return Err(ApiError::no_run_yet("a selection plan"));
    }
    Ok(snap)
}

fn rbt_of(snap: &qarisk::pipeline::ServingState) -> &RbtState {
    snap.rbt.as_ref().expect("checked by rbt()")
}

pub(crate) async fn ranked(State(state): State<Arc<AppState>>) -> Result<(HeaderMap, Json<SelectionPlan>), ApiError> {
    let snap = rbt(&state)?;
    let r = rbt_of(&snap);
    Ok((run_headers(&r.run_id, false), Json(r.plan.clone())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionWeight {
    pub name: String,
    pub kind: CriterionKind,
    pub weight: f64,
}

/// The criteria a what-if request may override, with their current weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaDoc {
    pub schema_version: u32,
    /// Id of the cached criteria set: the stage that produced the plan.
    pub set: String,
    pub run_id: String,
    pub time_averaging: TimeAveraging,
    pub criteria: Vec<CriterionWeight>,
}

fn no_cache(detail: &str) -> ApiError {
    ApiError::conflict("service.NoCachedCriteria", detail.to_string())
}

pub(crate) async fn criteria(State(state): State<Arc<AppState>>) -> Result<Json<CriteriaDoc>, ApiError> {
    let snap = state.snapshot();
    let r = snap
        .rbt
        .as_ref()
        .ok_or_else(|| no_cache("no selection run has been loaded"))?;
    let inputs = r
        .inputs
        .as_ref()
        .ok_or_else(|| no_cache("the latest plan has no cached criterion values"))?;
    let criteria = inputs
        .items
        .first()
        .map(|item| {
            item.criteria
                .iter()
                .map(|c| CriterionWeight {
                    name: c.name.clone(),
                    kind: c.kind,
                    weight: c.weight,
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(Json(CriteriaDoc {
        schema_version: API_SCHEMA_VERSION,
        set: r.stage.clone(),
        run_id: r.run_id.clone(),
        time_averaging: inputs.time_averaging,
        criteria,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    /// Criteria set to start from; the cached one when absent.
    #[serde(default)]
    pub base: Option<String>,
    /// Criterion name → replacement weight in [0, 1].
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    #[serde(default)]
    pub budget: Option<Budget>,
}

fn malformed(e: impl std::fmt::Display) -> ApiError {
    ApiError::bad_request("service.MalformedRequest", e.to_string())
}

pub(crate) async fn whatif(
    State(state): State<Arc<AppState>>,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> Result<(HeaderMap, Json<SelectionPlan>), ApiError> {
    let Json(req) = body.map_err(|e| malformed(e.body_text()))?;
    let snap = state.snapshot();
    let r = snap
        .rbt
        .as_ref()
        .ok_or_else(|| no_cache("no selection run has been loaded"))?;
    if let Some(base) = &req.base {
        if base != &r.stage {
            return Err(no_cache(&format!(
                "no cached criteria for set `{base}`; the cached set is `{}`",
                r.stage
            )));
        }
    }
    let inputs = r
        .inputs
        .as_ref()
        .ok_or_else(|| no_cache("the latest plan has no cached criterion values"))?;
    let known = inputs.criterion_names();
    for (name, w) in &req.overrides {
        if !known.contains(name) {
            return Err(ApiError::bad_request(
                "service.UnknownCriterion",
                format!("no criterion named `{name}`"),
            ));
        }
        if !(0.0..=1.0).contains(w) {
            return Err(ApiError::bad_request(
                "service.InvalidWeight",
                format!("weight for `{name}` must be in [0, 1], got {w}"),
            ));
        }
    }
    let plan = inputs
        .plan(&req.overrides, req.budget)
        .map_err(|e| ApiError::bad_request(e.code(), e.to_string()))?;
    Ok((run_headers(&r.run_id, true), Json(plan)))
}

fn defect(state: &AppState) -> Result<Arc<qarisk::pipeline::ServingState>, ApiError> {
    let snap = state.snapshot();
    if snap.defect.is_none() {
        return Err(ApiError::conflict(
            "service.NoModel",
            "no trained model has been loaded",
        ));
    }
    Ok(snap)
}

fn defect_of(snap: &qarisk::pipeline::ServingState) -> &DefectState {
    snap.defect.as_ref().expect("checked by defect()")
}

fn features<'a>(d: &'a DefectState, id: &str) -> Result<&'a [f64], ApiError> {
    d.features
        .get(id)
        .map(Vec::as_slice)
        .ok_or_else(|| ApiError::not_found("service.UnknownCommit", format!("commit `{id}` was not scored")))
}

fn learn_error(e: qarisk::learn::LearnError) -> ApiError {
    ApiError::bad_request(e.code(), e.to_string())
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub(crate) struct ThresholdQuery {
    threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRisk {
    pub schema_version: u32,
    pub commit_id: String,
    pub run_id: String,
    pub score: f64,
    pub alert: bool,
    pub threshold: f64,
}

pub(crate) async fn commit_risk(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    query: Result<Query<ThresholdQuery>, QueryRejection>,
) -> Result<Json<CommitRisk>, ApiError> {
    let Query(q) = query.map_err(|e| malformed(e.body_text()))?;
    let snap = defect(&state)?;
    let d = defect_of(&snap);
    let x = features(d, &id)?;
    let threshold = q.threshold.unwrap_or(d.threshold);
    let score = d.model.predict_proba(x).map_err(learn_error)?;
    let alert = classify(score, threshold).map_err(learn_error)? == Verdict::Alert;
    Ok(Json(CommitRisk {
        schema_version: API_SCHEMA_VERSION,
        commit_id: id,
        run_id: d.run_id.clone(),
        score,
        alert,
        threshold,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationDoc {
    pub schema_version: u32,
    pub commit_id: String,
    pub run_id: String,
    #[serde(flatten)]
    pub explanation: Explanation,
    /// The largest contributions by magnitude.
    pub top: Vec<FeatureAttribution>,
}

pub(crate) async fn commit_explanation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<ExplanationDoc>, ApiError> {
    let snap = defect(&state)?;
    let d = defect_of(&snap);
    let x = features(d, &id)?;
    let explanation = explain(&d.model, x).map_err(learn_error)?;
    let top = explanation.top(d.top_features).into_iter().cloned().collect();
    Ok(Json(ExplanationDoc {
        schema_version: API_SCHEMA_VERSION,
        commit_id: id,
        run_id: d.run_id.clone(),
        explanation,
        top,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitScore {
    pub commit_id: String,
    pub score: f64,
    pub alert: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitList {
    pub schema_version: u32,
    pub run_id: String,
    pub threshold: f64,
    /// Highest score first; ties by commit id.
    pub commits: Vec<CommitScore>,
}

pub(crate) async fn commits(State(state): State<Arc<AppState>>) -> Result<Json<CommitList>, ApiError> {
    let snap = defect(&state)?;
    let d = defect_of(&snap);
    let mut commits = d
        .features
        .iter()
        .map(|(id, x)| {
            let score = d.model.predict_proba(x).map_err(learn_error)?;
            let alert = classify(score, d.threshold).map_err(learn_error)? == Verdict::Alert;
            Ok(CommitScore {
                commit_id: id.clone(),
                score,
                alert,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    commits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.commit_id.cmp(&b.commit_id)));
    Ok(Json(CommitList {
        schema_version: API_SCHEMA_VERSION,
        run_id: d.run_id.clone(),
        threshold: d.threshold,
        commits,
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct RunsQuery {
    pipeline: String,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsDoc {
    pub schema_version: u32,
    pub pipeline: String,
    /// Oldest first.
    pub runs: Vec<RunSummary>,
}

pub(crate) async fn runs(
    State(state): State<Arc<AppState>>,
    query: Result<Query<RunsQuery>, QueryRejection>,
) -> Result<Json<RunsDoc>, ApiError> {
    let Query(q) = query.map_err(|e| malformed(e.body_text()))?;
    let range = (q.from.is_some() || q.to.is_some()).then_some(RunRange { from: q.from, to: q.to });
    let store = RunStore::new(state.artifact_dir());
    let runs = match history_query(&store, &q.pipeline, range) {
        Ok(runs) => runs,
        // a configured pipeline that has not run yet has an empty history
        Err(qarisk::pipeline::StoreError::UnknownPipeline(_)) if state.pipelines.contains_key(&q.pipeline) => {
            Vec::new()
        }
        Err(e @ qarisk::pipeline::StoreError::UnknownPipeline(_)) => {
            return Err(ApiError::not_found("service.UnknownPipeline", e.to_string()))
        }
        Err(e) => return Err(ApiError::internal(format!("{}: {e}", e.code()))),
    };
    Ok(Json(RunsDoc {
        schema_version: API_SCHEMA_VERSION,
        pipeline: q.pipeline,
        runs,
    }))
}
