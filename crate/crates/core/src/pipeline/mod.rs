//! Configuration-driven orchestration.
//!
//! A pipeline reads its sources through adapters, builds named collections
//! (filtered views with link chains into other collections), evaluates
//! expression-tree transforms over collection rows, then runs its stages in
//! feed order. Every artifact goes through [`ArtifactStore`] (temp file plus
//! rename) and every run, failed or not, ends as one line in the run log.

pub mod adapters;
pub mod collections;
pub mod config;
pub mod report;
pub mod run;
pub mod state;
pub mod store;

pub use adapters::{ingest_text, IngestError};
pub use collections::{link_collections, Collection, LinkError, LinkedView};
pub use config::{load_config, parse_config, ConfigError, Pipeline, PipelineConfig, StageKind, StageSettings};
pub use report::{render_report, ReportError};
pub use run::{dry_run, post_with_retry, run_pipeline, Alert, AlertFeature, DefectMetrics, DryRun, StageError};
pub use state::{DefectState, RbtState, ServingState};
pub use store::{
    history_query, ArtifactStore, Clock, FixedClock, RunOutcome, RunRange, RunRecord, RunStore, RunSummary, StoreError,
    SystemClock,
};
