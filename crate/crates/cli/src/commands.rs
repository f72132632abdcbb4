use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::{NaiveDate, Utc};
use qarisk::features::{FeatureConfig, FeatureRow, FeatureTable};
use qarisk::learn::{
    classify, evaluate, explain, time_ordered_split, train, EvalReport, FeatureAttribution, GbmModel, TrainConfig,
    TrainSet, Verdict,
};
use qarisk::model::{parse_records, Dataset, ValidationContext};
use qarisk::pipeline::config::AdapterKind;
use qarisk::pipeline::run::artifacts;
use qarisk::pipeline::store::write_atomic;
use qarisk::pipeline::{
    dry_run, history_query, ingest_text, load_config, render_report, run_pipeline, ArtifactStore, Pipeline, RunOutcome,
    RunRange, RunStore, StageSettings, SystemClock,
};
use qarisk::select::{Budget, PlanInputs, SelectionPlan};
use qarisk::szz::{label_commits, RepoModel, SzzConfig};
use serde::{Deserialize, Serialize};

use crate::{AdapterArg, Cli, CliError, Command, CommitArgs, Format};

type CmdResult = Result<(), CliError>;

/// `count:N` or `hours:H`.
pub fn parse_budget(s: &str) -> Result<Budget, String> {
    let (kind, n) = s.split_once(':').ok_or("expected count:N or hours:H")?;
    match kind {
        "count" => n.parse().map(Budget::Count).map_err(|e| format!("count `{n}`: {e}")),
        "hours" => n.parse().map(Budget::Hours).map_err(|e| format!("hours `{n}`: {e}")),
        _ => Err(format!("unknown budget kind `{kind}`")),
    }
}

fn coded<E: std::fmt::Display>(code: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::new(code, e)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("cli.Io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    write_atomic(path, bytes, false).map_err(|e| CliError::new("cli.Io", format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("documents serialize");
    s.push('\n');
    s
}

struct Output<'a> {
    format: Format,
    out: &'a mut dyn Write,
}

impl Output<'_> {
    /// The document in structured mode, `text` otherwise.
    fn emit<T: Serialize>(&mut self, doc: &T, text: impl FnOnce() -> String) -> CmdResult {
        let s = match self.format {
            Format::Structured => pretty(doc),
            Format::Text => text(),
        };
        self.out
            .write_all(s.as_bytes())
            .map_err(|e| CliError::new("cli.Io", format!("stdout: {e}")))
    }
}

fn today_or_now(today: Option<NaiveDate>) -> NaiveDate {
    today.unwrap_or_else(|| Utc::now().date_naive())
}

fn load_pipeline(path: &Path, seed: Option<u64>) -> Result<Pipeline, CliError> {
    let p = load_config(path).map_err(|e| CliError::new(e.code(), e))?;
    Ok(match seed {
        Some(s) => p.with_seed(s),
        None => p,
    })
}

fn load_records(path: &Path, today: Option<NaiveDate>) -> Result<Dataset, CliError> {
    let ctx = ValidationContext::new(today_or_now(today));
    parse_records(&read(path)?, &ctx).map_err(|e| CliError::new(e.error.code(), format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<GbmModel, CliError> {
    GbmModel::from_json(&read(path)?).map_err(|e| CliError::new(e.code(), format!("{}: {e}", path.display())))
}

fn load_row(args: &CommitArgs) -> Result<FeatureRow, CliError> {
    match (&args.commit, &args.features, &args.commit_id) {
        (Some(doc), _, _) => serde_json::from_str(&read(doc)?)
            .map_err(|e| CliError::new("cli.MalformedCommit", format!("{}: {e}", doc.display()))),
        (None, Some(table), Some(id)) => {
            let t = FeatureTable::from_csv(&read(table)?).map_err(|e| CliError::new(e.code(), e))?;
            t.rows.into_iter().find(|r| &r.commit_id == id).ok_or_else(|| {
                CliError::new(
                    "cli.UnknownCommit",
                    format!("no row for commit `{id}` in {}", table.display()),
                )
            })
        }
        _ => Err(CliError::new(
            "cli.MissingCommit",
            "give --commit or --features with --commit-id",
        )),
    }
}

pub(crate) fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let mut o = Output {
        format: cli.format,
        out,
    };
    let verbose = cli.verbose;
    let mut note = |msg: String| {
        if verbose {
            let _ = writeln!(err, "{msg}");
        }
    };
    match cli.command {
        Command::Ingest {
            input,
            adapter,
            today,
            out,
        } => ingest(&mut o, &input, adapter, today, out.as_deref()),
        Command::Score {
            config,
            stage,
            today,
            out,
            json,
            inputs,
            seed,
        } => {
            let p = load_pipeline(&config.config, seed)?;
            note(format!("scoring pipeline `{}`", p.name()));
            score(
                &mut o,
                &p,
                stage,
                today,
                out.as_deref(),
                json.as_deref(),
                inputs.as_deref(),
            )
        }
        Command::Select {
            inputs,
            budget,
            weights,
            out,
            json,
        } => select(&mut o, &inputs, budget, weights, out.as_deref(), json.as_deref()),
        Command::SzzLabel {
            records,
            today,
            suspect_partial_fixes,
            out,
            suspects,
        } => szz(
            &mut o,
            &records,
            today,
            suspect_partial_fixes,
            out.as_deref(),
            suspects.as_deref(),
        ),
        Command::ExtractFeatures {
            records,
            today,
            complexity_threshold,
            suspect_partial_fixes,
            no_labels,
            out,
        } => extract(
            &mut o,
            &records,
            today,
            complexity_threshold,
            suspect_partial_fixes,
            no_labels,
            &out,
        ),
        Command::Train {
            features,
            out,
            seed,
            n_trees,
            max_depth,
            learning_rate,
            subsample,
            test_fraction,
            threshold,
            metrics,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_trees {
                cfg.n_trees = n;
            }
            if let Some(d) = max_depth {
                cfg.max_depth = d;
            }
            if let Some(l) = learning_rate {
                cfg.learning_rate = l;
            }
            if let Some(s) = subsample {
                cfg.subsample = s;
            }
            train_cmd(
                &mut o,
                &features,
                &out,
                &cfg,
                test_fraction,
                threshold,
                metrics.as_deref(),
            )
        }
        Command::Predict {
            model,
            commit,
            threshold,
            top,
        } => predict(&mut o, &load_model(&model)?, &load_row(&commit)?, threshold, top),
        Command::Explain { model, commit } => {
            let (model, row) = (load_model(&model)?, load_row(&commit)?);
            let e = explain(&model, &row.values).map_err(|e| CliError::new(e.code(), e))?;
            o.emit(&e, || {
                let mut s = format!("{}: raw {:.6} = base {:.6}", row.commit_id, e.raw, e.base_value);
                for a in e
                    .top(e.contributions.len())
                    .into_iter()
                    .filter(|a| a.contribution != 0.0)
                {
                    s.push_str(&format!("\n  {:+.6} {} = {}", a.contribution, a.feature, a.value));
                }
                s.push('\n');
                s
            })
        }
        Command::RunPipeline {
            config,
            artifacts,
            seed,
        } => {
            let p = load_pipeline(&config.config, seed)?;
            note(format!(
                "running pipeline `{}` into {}",
                p.name(),
                artifacts.artifact_dir.display()
            ));
            run_cmd(&mut o, &p, &artifacts.artifact_dir)
        }
        Command::Report {
            artifacts,
            pipeline,
            run,
            template,
            out,
        } => report(
            &mut o,
            &artifacts.artifact_dir,
            &pipeline,
            run.as_deref(),
            &template,
            out.as_deref(),
        ),
        Command::History {
            artifacts,
            pipeline,
            from,
            to,
        } => {
            let range = (from.is_some() || to.is_some()).then_some(RunRange { from, to });
            let runs = history_query(&RunStore::new(&artifacts.artifact_dir), &pipeline, range)
                .map_err(|e| CliError::new(e.code(), e))?;
            o.emit(&runs, || {
                runs.iter()
                    .map(|r| {
                        format!(
                            "{}\t{}\t{:?}\t{}\n",
                            r.run_id,
                            r.started_at.to_rfc3339(),
                            r.status,
                            r.failed_stage.as_deref().unwrap_or("-")
                        )
                    })
                    .collect()
            })
        }
        Command::Serve {
            artifacts,
            configs,
            host,
            port,
        } => serve(&artifacts.artifact_dir, &configs, &host, port, &mut note),
        Command::GenFixture { out, seed } => {
            let mut written = Vec::new();
            for (rel, content) in qarisk::synth::fixture_files(seed) {
                write(&out.join(&rel), content.as_bytes())?;
                written.push(rel);
            }
            o.emit(&written, || {
                format!("wrote {} files to {}\n", written.len(), out.display())
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub tests: usize,
    pub runs: usize,
    pub bugs: usize,
    pub commits: usize,
    pub telemetry: usize,
}

fn ingest(
    o: &mut Output<'_>,
    input: &Path,
    adapter: AdapterArg,
    today: Option<NaiveDate>,
    out: Option<&Path>,
) -> CmdResult {
    let kind = match adapter {
        AdapterArg::Records => AdapterKind::Records,
        AdapterArg::TelemetryCsv => AdapterKind::TelemetryCsv,
        AdapterArg::VcsLog => AdapterKind::VcsLog,
    };
    let ctx = ValidationContext::new(today_or_now(today));
    let ds =
        ingest_text(kind, &input.display().to_string(), &read(input)?, &ctx).map_err(|e| CliError::new(e.code(), e))?;
    let ndjson = ds.to_ndjson();
    let summary = IngestSummary {
        tests: ds.tests.len(),
        runs: ds.runs.len(),
        bugs: ds.bugs.len(),
        commits: ds.commits.len(),
        telemetry: ds.telemetry.len(),
    };
    match out {
        Some(path) => {
            write(path, ndjson.as_bytes())?;
            o.emit(&summary, || {
                format!(
                    "{} tests, {} runs, {} bugs, {} commits, {} telemetry records\n",
                    summary.tests, summary.runs, summary.bugs, summary.commits, summary.telemetry
                )
            })
        }
        None => o.emit(&summary, || ndjson),
    }
}

fn plan_text(plan: &SelectionPlan) -> String {
    format!(
        "{} of {} tests selected ({:.2} h), {} stale\n",
        plan.selected_count(),
        plan.entries.len(),
        plan.selected_hours(),
        plan.stale_count()
    )
}

fn write_plan(plan: &SelectionPlan, tsv: Option<&Path>, json: Option<&Path>) -> CmdResult {
    if let Some(p) = tsv {
        write(p, plan.to_tsv().as_bytes())?;
    }
    if let Some(p) = json {
        write(p, pretty(plan).as_bytes())?;
    }
    Ok(())
}

fn score(
    o: &mut Output<'_>,
    p: &Pipeline,
    stage: Option<String>,
    today: Option<NaiveDate>,
    tsv: Option<&Path>,
    json: Option<&Path>,
    inputs: Option<&Path>,
) -> CmdResult {
    let rbt_stages: Vec<&str> = p
        .config
        .stages
        .iter()
        .zip(&p.settings)
        .filter(|(_, s)| matches!(s, StageSettings::Rbt(_)))
        .map(|(c, _)| c.name.as_str())
        .collect();
    let stage = match stage {
        Some(s) if rbt_stages.contains(&s.as_str()) => s,
        Some(s) => {
            return Err(CliError::new(
                "cli.NotASelectionStage",
                format!("`{s}` is not a selection stage"),
            ))
        }
        None => rbt_stages
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| CliError::new("cli.NotASelectionStage", "the pipeline has no selection stage"))?,
    };
    let dry = dry_run(p, today_or_now(today)).map_err(|e| CliError::new(e.code.clone(), e))?;
    let plan = dry.plan(&stage).expect("selection stages write a plan");
    write_plan(&plan, tsv, json)?;
    if let Some(path) = inputs {
        write(
            path,
            dry.artifact(&stage, artifacts::PLAN_INPUTS)
                .expect("selection stages cache inputs"),
        )?;
    }
    o.emit(&plan, || plan_text(&plan))
}

fn select(
    o: &mut Output<'_>,
    inputs: &Path,
    budget: Option<Budget>,
    weights: Vec<(String, f64)>,
    tsv: Option<&Path>,
    json: Option<&Path>,
) -> CmdResult {
    let inputs: PlanInputs = serde_json::from_str(&read(inputs)?)
        .map_err(|e| CliError::new("cli.MalformedInputs", format!("{}: {e}", inputs.display())))?;
    let known = inputs.criterion_names();
    if let Some((name, _)) = weights.iter().find(|(n, _)| !known.contains(n)) {
        return Err(CliError::new(
            "cli.UnknownCriterion",
            format!("no criterion named `{name}`"),
        ));
    }
    let overrides: BTreeMap<String, f64> = weights.into_iter().collect();
    let plan = inputs
        .plan(&overrides, budget)
        .map_err(|e| CliError::new(e.code(), e))?;
    write_plan(&plan, tsv, json)?;
    o.emit(&plan, || plan_text(&plan))
}

fn szz(
    o: &mut Output<'_>,
    records: &Path,
    today: Option<NaiveDate>,
    suspect_partial_fixes: bool,
    out: Option<&Path>,
    suspects: Option<&Path>,
) -> CmdResult {
    let ds = load_records(records, today)?;
    let repo = RepoModel::build(ds.commits).map_err(|e| CliError::new(e.code(), e))?;
    let outcome =
        label_commits(&repo, &ds.bugs, SzzConfig { suspect_partial_fixes }).map_err(|e| CliError::new(e.code(), e))?;
    if let Some(p) = out {
        write(p, outcome.labels_tsv().as_bytes())?;
    }
    if let Some(p) = suspects {
        write(p, outcome.suspects_tsv().as_bytes())?;
    }
    o.emit(&outcome, || {
        format!(
            "{} bug-inducing commits from {} fix links; {} suspects, {} bugs skipped\n",
            outcome.inducing_ids().len(),
            outcome.links.len(),
            outcome.suspects.len(),
            outcome.skipped.len()
        )
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub rows: usize,
    pub features: usize,
    pub positives: Option<usize>,
    pub warnings: usize,
}

fn extract(
    o: &mut Output<'_>,
    records: &Path,
    today: Option<NaiveDate>,
    complexity_threshold: u32,
    suspect_partial_fixes: bool,
    no_labels: bool,
    out: &Path,
) -> CmdResult {
    let ds = load_records(records, today)?;
    let repo = RepoModel::build(ds.commits).map_err(|e| CliError::new(e.code(), e))?;
    let mut table =
        FeatureTable::extract(&repo, FeatureConfig { complexity_threshold }).map_err(|e| CliError::new(e.code(), e))?;
    if !no_labels {
        let outcome = label_commits(&repo, &ds.bugs, SzzConfig { suspect_partial_fixes })
            .map_err(|e| CliError::new(e.code(), e))?;
        table = table.with_labels(&outcome.inducing_ids());
    }
    write(out, table.to_csv().map_err(|e| CliError::new(e.code(), e))?.as_bytes())?;
    let summary = FeatureSummary {
        rows: table.rows.len(),
        features: table.names.len(),
        positives: table.labels.as_ref().map(|l| l.iter().filter(|y| **y).count()),
        warnings: table.rows.iter().map(|r| r.warnings.len()).sum(),
    };
    o.emit(&summary, || {
        format!(
            "{} commits x {} features written to {}\n",
            summary.rows,
            summary.features,
            out.display()
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_positives: usize,
    pub evaluation: Option<EvalReport>,
}

fn train_cmd(
    o: &mut Output<'_>,
    features: &Path,
    out: &Path,
    cfg: &TrainConfig,
    test_fraction: f64,
    threshold: f64,
    metrics: Option<&Path>,
) -> CmdResult {
    let table = FeatureTable::from_csv(&read(features)?).map_err(|e| CliError::new(e.code(), e))?;
    let set = TrainSet::from_table(&table).map_err(|e| CliError::new(e.code(), e))?;
    let ts: Vec<_> = table.rows.iter().map(|r| r.timestamp).collect();
    let (train_idx, test_idx) = time_ordered_split(&ts, test_fraction);
    let train_set = set.subset(&train_idx);
    let model = train(&train_set, cfg).map_err(|e| CliError::new(e.code(), e))?;
    let evaluation = if test_idx.is_empty() {
        None
    } else {
        Some(evaluate(&model, &set.subset(&test_idx), threshold).map_err(|e| CliError::new(e.code(), e))?)
    };
    write(out, model.to_json().as_bytes())?;
    let summary = TrainSummary {
        train_rows: train_idx.len(),
        test_rows: test_idx.len(),
        train_positives: train_set.y.iter().filter(|y| **y).count(),
        evaluation,
    };
    if let Some(p) = metrics {
        write(p, pretty(&summary).as_bytes())?;
    }
    o.emit(&summary, || match &summary.evaluation {
        Some(e) => format!(
            "trained on {} rows; held-out macro F1 {:.3}, bug-inducing precision {:.3} recall {:.3}\n",
            summary.train_rows, e.macro_f1, e.positive.precision, e.positive.recall
        ),
        None => format!("trained on {} rows; no held-out rows\n", summary.train_rows),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub commit_id: String,
    pub score: f64,
    pub raw: f64,
    pub alert: bool,
    pub threshold: f64,
    pub top_features: Vec<FeatureAttribution>,
}

fn predict(o: &mut Output<'_>, model: &GbmModel, row: &FeatureRow, threshold: f64, top: usize) -> CmdResult {
    let score = model
        .predict_proba(&row.values)
        .map_err(|e| CliError::new(e.code(), e))?;
    let alert = classify(score, threshold).map_err(|e| CliError::new(e.code(), e))? == Verdict::Alert;
    let ex = explain(model, &row.values).map_err(|e| CliError::new(e.code(), e))?;
    let p = Prediction {
        commit_id: row.commit_id.clone(),
        score,
        raw: ex.raw,
        alert,
        threshold,
        top_features: ex.top(top).into_iter().cloned().collect(),
    };
    o.emit(&p, || {
        let mut s = format!(
            "{} score {:.6} {} (threshold {})",
            p.commit_id,
            p.score,
            if p.alert { "ALERT" } else { "pass" },
            p.threshold
        );
        for f in &p.top_features {
            s.push_str(&format!("\n  {:+.6} {} = {}", f.contribution, f.feature, f.value));
        }
        s.push('\n');
        s
    })
}

fn run_cmd(o: &mut Output<'_>, p: &Pipeline, artifact_dir: &Path) -> CmdResult {
    let record = run_pipeline(p, &SystemClock, artifact_dir).map_err(|e| CliError::new(e.code(), e))?;
    o.emit(&record, || {
        let mut s = format!(
            "{} {:?}: {} artifacts, digest {}\n",
            record.run_id,
            record.status,
            record.artifacts.len(),
            record.artifact_digest()
        );
        if !record.warnings.is_empty() {
            s.push_str(&format!("{} warnings recorded in the run log\n", record.warnings.len()));
        }
        s
    })?;
    match (&record.status, &record.error) {
        (RunOutcome::Succeeded, _) => Ok(()),
        (RunOutcome::Failed, Some(e)) => Err(CliError::new(
            e.code.clone(),
            format!(
                "run {} failed in stage `{}`: {}",
                record.run_id,
                record.failed_stage.as_deref().unwrap_or("?"),
                e.message
            ),
        )),
        (RunOutcome::Failed, None) => Err(CliError::new(
            "pipeline.RunFailed",
            format!("run {} failed", record.run_id),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub run_id: String,
    pub template: String,
    pub document: String,
}

fn report(
    o: &mut Output<'_>,
    artifact_dir: &Path,
    pipeline: &str,
    run: Option<&str>,
    template: &str,
    out: Option<&Path>,
) -> CmdResult {
    let records = RunStore::new(artifact_dir)
        .records()
        .map_err(|e| CliError::new(e.code(), e))?;
    let ok = |r: &&qarisk::pipeline::RunRecord| r.pipeline == pipeline && r.status == RunOutcome::Succeeded;
    let pos = match run {
        Some(id) => records
            .iter()
            .position(|r| r.run_id == id && r.pipeline == pipeline)
            .ok_or_else(|| CliError::new("pipeline.UnknownRun", format!("no run `{id}` of pipeline `{pipeline}`")))?,
        None => records
            .iter()
            .rposition(|r| ok(&r))
            .ok_or_else(|| CliError::new("pipeline.UnknownPipeline", format!("no successful run of `{pipeline}`")))?,
    };
    let previous = records[..pos].iter().rev().find(ok);
    let doc = render_report(&ArtifactStore::new(artifact_dir), &records[pos], previous, template)
        .map_err(|e| CliError::new(e.code(), e))?;
    if let Some(p) = out {
        write(p, doc.as_bytes())?;
    }
    let rd = ReportDocument {
        run_id: records[pos].run_id.clone(),
        template: template.to_string(),
        document: doc,
    };
    o.emit(&rd, || rd.document.clone())
}

fn serve(
    artifact_dir: &Path,
    configs: &[std::path::PathBuf],
    host: &str,
    port: u16,
    note: &mut dyn FnMut(String),
) -> CmdResult {
    let pipelines = configs
        .iter()
        .map(|c| load_pipeline(c, None))
        .collect::<Result<Vec<_>, _>>()?;
    let state = qarisk_service::AppState::new(artifact_dir, pipelines, Arc::new(SystemClock))
        .map_err(|e| CliError::new(e.code(), e))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(coded("cli.Io"))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::new("cli.Bind", format!("{host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(coded("cli.Io"))?;
        note(format!("listening on http://{addr}"));
        qarisk_service::serve(listener, Arc::new(state))
            .await
            .map_err(coded("cli.Io"))
    })
}
