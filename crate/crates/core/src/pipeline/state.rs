//! Read-side view of the newest successful runs, for serving.

use std::collections::BTreeMap;
use std::path::Path;

use crate::features::FeatureTable;
use crate::learn::GbmModel;
use crate::select::{PlanInputs, SelectionPlan};

use super::run::{artifacts, DefectMetrics};
use super::store::{ArtifactStore, RunOutcome, RunRecord, RunStore, StoreError};

/// The latest selection plan and the inputs it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct RbtState {
    pub run_id: String,
    pub stage: String,
    pub plan: SelectionPlan,
    /// Absent when the run predates the inputs cache.
    pub inputs: Option<PlanInputs>,
}

/// The latest trained model with the feature rows it scored.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectState {
    pub run_id: String,
    pub stage: String,
    pub model: GbmModel,
    pub threshold: f64,
    pub top_features: usize,
    pub features: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServingState {
    pub rbt: Option<RbtState>,
    pub defect: Option<DefectState>,
}

fn read_json<T: serde::de::DeserializeOwned>(store: &ArtifactStore, path: &str) -> Option<T> {
    serde_json::from_slice(&store.read(path).ok()?).ok()
}

fn rbt_from(store: &ArtifactStore, r: &RunRecord) -> Option<RbtState> {
    let a = r.artifacts.iter().rev().find(|a| a.name == artifacts::PLAN_JSON)?;
    let plan = read_json(store, &a.artifact.path)?;
    let inputs = r
        .artifact(&a.stage, artifacts::PLAN_INPUTS)
        .and_then(|i| read_json(store, &i.path));
    Some(RbtState {
        run_id: r.run_id.clone(),
        stage: a.stage.clone(),
        plan,
        inputs,
    })
}

fn defect_from(store: &ArtifactStore, r: &RunRecord) -> Option<DefectState> {
    let a = r.artifacts.iter().rev().find(|a| a.name == artifacts::MODEL)?;
    let model = GbmModel::from_json(&store.read_string(&a.artifact.path).ok()?).ok()?;
    let metrics: DefectMetrics = read_json(store, &r.artifact(&a.stage, artifacts::METRICS)?.path)?;
    let table = FeatureTable::from_csv(
        &store
            .read_string(&r.artifact(&a.stage, artifacts::FEATURES)?.path)
            .ok()?,
    )
    .ok()?;
    Some(DefectState {
        run_id: r.run_id.clone(),
        stage: a.stage.clone(),
        model,
        threshold: metrics.threshold,
        top_features: metrics.top_features,
        features: table.rows.into_iter().map(|row| (row.commit_id, row.values)).collect(),
    })
}

impl ServingState {
    /// Newest loadable plan and model across all pipelines in `root`.
    pub fn load(root: &Path) -> Result<Self, StoreError> {
        let store = ArtifactStore::new(root);
        let records = RunStore::new(root).records()?;
        let mut state = ServingState::default();
        for r in records.iter().rev().filter(|r| r.status == RunOutcome::Succeeded) {
            if state.rbt.is_none() {
                state.rbt = rbt_from(&store, r);
            }
            if state.defect.is_none() {
                state.defect = defect_from(&store, r);
            }
            if state.rbt.is_some() && state.defect.is_some() {
                break;
            }
        }
        Ok(state)
    }
}
