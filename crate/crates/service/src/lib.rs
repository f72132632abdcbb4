//! HTTP API over the engine: the latest selection plan, what-if re-scoring,
//! commit risk with explanations, pipeline triggers and run history.
//!
//! Every body is JSON. Read endpoints work on an immutable snapshot of the
//! newest successful runs; a finished pipeline run swaps in a new snapshot,
//! so readers see either the old plan or the new one, never a mix.

mod error;
mod handlers;
mod jobs;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::routing::{get, post};
use axum::Router;
use qarisk::pipeline::{Clock, Pipeline, ServingState, StoreError};

pub use error::{ApiError, ErrorDoc};
pub use handlers::{
    CommitList, CommitRisk, CommitScore, CriteriaDoc, CriterionWeight, ExplanationDoc, RunsDoc, WhatIfRequest,
    EPHEMERAL_HEADER, RUN_HEADER,
};
pub use jobs::{JobState, JobStatus};

/// Version stamped on every response document the service defines.
pub const API_SCHEMA_VERSION: u32 = 1;

/// Shared by all handlers.
pub struct AppState {
    artifact_dir: PathBuf,
    pipelines: BTreeMap<String, Pipeline>,
    clock: Arc<dyn Clock>,
    serving: RwLock<Arc<ServingState>>,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
}

impl AppState {
    /// Loads the newest serving snapshot from `artifact_dir`.
    pub fn new(
        artifact_dir: impl Into<PathBuf>,
        pipelines: Vec<Pipeline>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StoreError> {
        let artifact_dir = artifact_dir.into();
        let serving = ServingState::load(&artifact_dir)?;
        Ok(AppState {
            artifact_dir,
            pipelines: pipelines.into_iter().map(|p| (p.name().to_string(), p)).collect(),
            clock,
            serving: RwLock::new(Arc::new(serving)),
            jobs: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn artifact_dir(&self) -> &Path {
        &self.artifact_dir
    }

    /// The current snapshot; cheap, and never blocks on a reload.
    pub fn snapshot(&self) -> Arc<ServingState> {
        self.serving.read().expect("serving lock poisoned").clone()
    }

    /// Replaces the snapshot wholesale.
    pub fn install(&self, state: ServingState) {
        *self.serving.write().expect("serving lock poisoned") = Arc::new(state);
    }

    /// Rereads the artifact directory into a new snapshot.
    pub fn reload(&self) -> Result<(), StoreError> {
        let state = ServingState::load(&self.artifact_dir)?;
        self.install(state);
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tests/ranked", get(handlers::ranked))
        .route("/criteria", get(handlers::criteria))
        .route("/whatif", post(handlers::whatif))
        .route("/commits", get(handlers::commits))
        .route("/commits/{id}/risk", get(handlers::commit_risk))
        .route("/commits/{id}/explanation", get(handlers::commit_explanation))
        .route("/pipelines/{name}/run", post(jobs::trigger).get(jobs::status))
        .route("/runs", get(handlers::runs))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
