//! Markdown run reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::run::{artifacts, Alert, DefectMetrics};
use super::store::{ArtifactStore, RunOutcome, RunRecord};
use crate::select::SelectionPlan;

/// Rows listed in a report's selection table.
pub const REPORT_TOP_TESTS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("unknown report template `{0}`")]
    UnknownTemplate(String),
    #[error("run {0} has not finished successfully")]
    RunNotFinished(String),
    #[error("artifact {path}: {message}")]
    Artifact { path: String, message: String },
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            ReportError::UnknownTemplate(_) => "pipeline.UnknownTemplate",
            ReportError::RunNotFinished(_) => "pipeline.RunNotFinished",
            ReportError::Artifact { .. } => "pipeline.ArtifactUnreadable",
        }
    }
}

fn load<T: serde::de::DeserializeOwned>(store: &ArtifactStore, path: &str) -> Result<T, ReportError> {
    let err = |message: String| ReportError::Artifact {
        path: path.to_string(),
        message,
    };
    let bytes = store.read(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
}

/// Stage names in the order their artifacts were recorded.
fn stages_with(record: &RunRecord, artifact: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    record
        .artifacts
        .iter()
        .filter(|a| a.name == artifact && seen.insert(a.stage.clone()))
        .map(|a| a.stage.clone())
        .collect()
}

fn selection_section(out: &mut String, stage: &str, plan: &SelectionPlan) {
    let _ = writeln!(out, "## Test selection `{stage}`\n");
    let _ = writeln!(
        out,
        "{} of {} tests selected ({:.2} h); {} flagged stale.\n",
        plan.selected_count(),
        plan.entries.len(),
        plan.selected_hours(),
        plan.stale_count()
    );
    out.push_str("| rank | test | R | P | I | T | selected | stale |\n");
    out.push_str("|---:|---|---:|---:|---:|---:|---|---|\n");
    for e in plan.entries.iter().take(REPORT_TOP_TESTS) {
        let r = &e.ranked;
        let stale: Vec<&str> = e.stale_reasons.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.3} | {} | {} |",
            r.rank,
            r.test_id,
            r.r,
            r.p,
            r.i,
            r.t,
            if e.selected { "yes" } else { "no" },
            stale.join(", ")
        );
    }
    out.push('\n');
}

fn alerts_section(out: &mut String, stage: &str, alerts: &[Alert], metrics: &DefectMetrics, commits: Option<f64>) {
    let _ = writeln!(out, "## Commit alerts `{stage}`\n");
    let total = commits.map_or_else(String::new, |c| format!(" of {c}"));
    let _ = writeln!(
        out,
        "{}{total} commits scored at or above {}.\n",
        alerts.len(),
        metrics.threshold
    );
    for (k, a) in alerts.iter().enumerate() {
        let _ = writeln!(out, "{}. `{}` score {:.4} by {}", k + 1, a.commit_id, a.score, a.author);
        for f in &a.top_features {
            let _ = writeln!(out, "   - {} = {}: {:+.4}", f.feature, f.value, f.contribution);
        }
    }
    out.push('\n');
}

fn deltas_section(out: &mut String, run: &RunRecord, previous: Option<&RunRecord>) {
    out.push_str("## Changes since previous run\n\n");
    let Some(prev) = previous else {
        out.push_str("no prior run\n");
        return;
    };
    let _ = writeln!(out, "Compared with {}.\n", prev.run_id);
    out.push_str("| metric | previous | current | delta |\n|---|---:|---:|---:|\n");
    for (name, cur) in &run.metrics {
        match prev.metrics.get(name) {
            Some(old) => {
                let _ = writeln!(out, "| {name} | {old} | {cur} | {:+} |", cur - old);
            }
            None => {
                let _ = writeln!(out, "| {name} | | {cur} | |");
            }
        }
    }
}

/// Renders `run` with `template`. The only template is `summary`: top tests
/// of each selection stage with their factor breakdown, every alert of each
/// defect stage with its top features, and metric changes against
/// `previous`.
pub fn render_report(
    store: &ArtifactStore,
    run: &RunRecord,
    previous: Option<&RunRecord>,
    template: &str,
) -> Result<String, ReportError> {
    if template != "summary" {
        return Err(ReportError::UnknownTemplate(template.to_string()));
    }
    if run.status != RunOutcome::Succeeded {
        return Err(ReportError::RunNotFinished(run.run_id.clone()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "# Run report: {}\n", run.pipeline);
    let _ = writeln!(out, "- run: {}", run.run_id);
    let _ = writeln!(out, "- started: {}", run.started_at.to_rfc3339());
    let _ = writeln!(
        out,
        "- config: {}\n",
        &run.config_digest[..12.min(run.config_digest.len())]
    );

    for stage in stages_with(run, artifacts::PLAN_JSON) {
        let path = &run.artifact(&stage, artifacts::PLAN_JSON).expect("listed").path;
        let plan: SelectionPlan = load(store, path)?;
        selection_section(&mut out, &stage, &plan);
    }
    for stage in stages_with(run, artifacts::ALERTS) {
        let alerts: Vec<Alert> = load(store, &run.artifact(&stage, artifacts::ALERTS).expect("listed").path)?;
        let metrics_path = run
            .artifact(&stage, artifacts::METRICS)
            .map(|a| a.path.clone())
            .ok_or_else(|| ReportError::Artifact {
                path: format!("{stage}/{}", artifacts::METRICS),
                message: "missing".into(),
            })?;
        let metrics: DefectMetrics = load(store, &metrics_path)?;
        let commits = run.metrics.get(&format!("{stage}.commits")).copied();
        alerts_section(&mut out, &stage, &alerts, &metrics, commits);
    }
    deltas_section(&mut out, run, previous);
    Ok(out)
}
