//! Asynchronous pipeline runs, one at a time per pipeline name.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use chrono::{DateTime, Utc};
use qarisk::pipeline::{run_pipeline, RunOutcome};
use serde::{Deserialize, Serialize};

use crate::{ApiError, AppState, API_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }
}

/// The latest trigger of one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub schema_version: u32,
    pub pipeline: String,
    /// Counts triggers of this pipeline since the service started.
    pub job: u64,
    pub state: JobState,
    /// Every state this job has been in, oldest first.
    pub transitions: Vec<JobState>,
    pub queued_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn update(state: &AppState, pipeline: &str, f: impl FnOnce(&mut JobStatus)) {
    let mut jobs = state.jobs.lock().expect("jobs lock poisoned");
    if let Some(job) = jobs.get_mut(pipeline) {
        f(job);
    }
}

fn advance(job: &mut JobStatus, next: JobState) {
    job.state = next;
    job.transitions.push(next);
}

pub(crate) async fn trigger(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
) -> Result<(StatusCode, Json<JobStatus>), ApiError> {
    if !state.pipelines.contains_key(&name) {
        return Err(ApiError::not_found(
            "service.UnknownPipeline",
            format!("no pipeline named `{name}` is configured"),
        ));
    }
    let queued = {
        let mut jobs = state.jobs.lock().expect("jobs lock poisoned");
        let previous = jobs.get(&name);
        if let Some(p) = previous.filter(|p| p.state.is_active()) {
            return Err(ApiError::conflict(
                "service.AlreadyRunning",
                format!("pipeline `{name}` job {} is {:?}", p.job, p.state),
            ));
        }
        let job = JobStatus {
            schema_version: API_SCHEMA_VERSION,
            pipeline: name.clone(),
            job: previous.map_or(1, |p| p.job + 1),
            state: JobState::Queued,
            transitions: vec![JobState::Queued],
            queued_at: state.clock.now(),
            run_id: None,
            error: None,
        };
        jobs.insert(name.clone(), job.clone());
        job
    };
    tokio::spawn(execute(state, name));
    Ok((StatusCode::ACCEPTED, Json(queued)))
}

async fn execute(state: Arc<AppState>, name: String) {
    update(&state, &name, |j| advance(j, JobState::Running));
    let worker = state.clone();
    let pipeline = name.clone();
    let result = tokio::task::spawn_blocking(move || {
        let p = &worker.pipelines[&pipeline];
        let record = run_pipeline(p, worker.clock.as_ref(), &worker.artifact_dir)?;
        worker.reload()?;
        Ok::<_, qarisk::pipeline::StoreError>(record)
    })
    .await;
    update(&state, &name, |j| match result {
        Ok(Ok(record)) => {
            j.run_id = Some(record.run_id.clone());
            if record.status == RunOutcome::Succeeded {
                advance(j, JobState::Done);
            } else {
                j.error = record.error.map(|e| format!("{}: {}", e.code, e.message));
                advance(j, JobState::Failed);
            }
        }
        Ok(Err(e)) => {
            j.error = Some(format!("{}: {e}", e.code()));
            advance(j, JobState::Failed);
        }
        Err(e) => {
            j.error = Some(format!("service.Internal: {e}"));
            advance(j, JobState::Failed);
        }
    });
}

pub(crate) async fn status(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
) -> Result<Json<JobStatus>, ApiError> {
    if !state.pipelines.contains_key(&name) {
        return Err(ApiError::not_found(
            "service.UnknownPipeline",
            format!("no pipeline named `{name}` is configured"),
        ));
    }
    let jobs = state.jobs.lock().expect("jobs lock poisoned");
    jobs.get(&name)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("service.NoRunYet", format!("pipeline `{name}` has not been triggered")))
}
