//! The `qarisk` command line. Each subcommand parses its flags, calls one
//! library operation and serializes the result; `--format structured`
//! prints the result document as JSON so scripts see what the library
//! returned.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use commands::parse_budget;

/// Exit status of a successful command.
pub const EXIT_OK: u8 = 0;
/// A domain error: bad input data, a failed run, a missing artifact.
pub const EXIT_DOMAIN: u8 = 1;
/// Bad flags or an unknown subcommand.
pub const EXIT_USAGE: u8 = 2;

/// Fallback for `--config` flags.
pub const CONFIG_ENV: &str = "QARISK_CONFIG";
/// Fallback for `--artifact-dir` flags.
pub const ARTIFACT_DIR_ENV: &str = "QARISK_ARTIFACT_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Human-readable summaries.
    #[default]
    Text,
    /// One JSON document on standard output.
    Structured,
}

#[derive(Debug, Parser)]
#[command(
    name = "qarisk",
    version,
    about = "Risk-based test selection and commit risk prediction"
)]
pub struct Cli {
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,
    /// Extra progress output on standard error.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config file.
    #[arg(long, env = CONFIG_ENV)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ArtifactDirArg {
    /// Root of the artifact store and run log.
    #[arg(long, env = ARTIFACT_DIR_ENV, default_value = "artifacts")]
    pub artifact_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CommitArgs {
    /// A feature row document (`commit_id`, `author`, `timestamp`, `values`).
    #[arg(long, conflicts_with_all = ["features", "commit_id"])]
    pub commit: Option<PathBuf>,
    /// Feature table to pick the commit from, with `--commit-id`.
    #[arg(long, requires = "commit_id")]
    pub features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    pub commit_id: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validates one source file and writes it as normalized records.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = AdapterArg::Records)]
        adapter: AdapterArg,
        /// Reference date for validation (default: today).
        #[arg(long)]
        today: Option<NaiveDate>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Computes a stage's selection plan from a pipeline config without
    /// recording a run.
    Score {
        #[command(flatten)]
        config: ConfigArg,
        /// Selection stage (default: the first one).
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        today: Option<NaiveDate>,
        /// Plan as tab-separated text.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plan as a JSON document.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Cached criterion values, for `select` and what-if runs.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-ranks cached criterion values under new weights or a new budget.
    Select {
        /// `plan_inputs.json` from a run or from `score --inputs`.
        #[arg(long)]
        inputs: PathBuf,
        /// `count:N` or `hours:H`.
        #[arg(long, value_parser = parse_budget)]
        budget: Option<qarisk::select::Budget>,
        /// `name=weight`, repeatable.
        #[arg(long = "weight", value_parser = parse_weight)]
        weights: Vec<(String, f64)>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Labels bug-inducing commits from fixes linked to bug reports.
    SzzLabel {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        today: Option<NaiveDate>,
        #[arg(long)]
        suspect_partial_fixes: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        suspects: Option<PathBuf>,
    },
    /// Computes per-commit features, labelled from the same records.
    ExtractFeatures {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        today: Option<NaiveDate>,
        #[arg(long, default_value_t = 10)]
        complexity_threshold: u32,
        #[arg(long)]
        suspect_partial_fixes: bool,
        /// Leave the label column out.
        #[arg(long)]
        no_labels: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a commit risk model on the oldest rows of a feature table and
    /// evaluates it on the newest.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_trees: Option<usize>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        subsample: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Evaluation report as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Scores one commit.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        commit: CommitArgs,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Breaks one commit's score into per-feature contributions.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        commit: CommitArgs,
    },
    /// Runs a pipeline and records it in the run log.
    RunPipeline {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        artifacts: ArtifactDirArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Renders the report of a recorded run.
    Report {
        #[command(flatten)]
        artifacts: ArtifactDirArg,
        #[arg(long)]
        pipeline: String,
        /// Run id (default: the latest successful run).
        #[arg(long)]
        run: Option<String>,
        #[arg(long, default_value = "summary")]
        template: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lists run summaries of a pipeline, oldest first.
    History {
        #[command(flatten)]
        artifacts: ArtifactDirArg,
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
    },
    /// Serves the HTTP API.
    Serve {
        #[command(flatten)]
        artifacts: ArtifactDirArg,
        /// Pipelines that may be triggered over HTTP, repeatable.
        #[arg(long = "config", env = CONFIG_ENV, value_delimiter = ',')]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "QARISK_PORT", default_value_t = 8080)]
        port: u16,
    },
    /// Writes the bundled synthetic fixture: records, telemetry, criteria,
    /// expression trees and two pipeline configs.
    GenFixture {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
        #[arg(long, default_value_t = qarisk::synth::FIXTURE_SEED)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdapterArg {
    Records,
    TelemetryCsv,
    VcsLog,
}

fn parse_weight(s: &str) -> Result<(String, f64), String> {
    let (name, w) = s.split_once('=').ok_or("expected name=weight")?;
    let w: f64 = w.parse().map_err(|e| format!("weight `{w}`: {e}"))?;
    Ok((name.to_string(), w))
}

/// A failure with a module-qualified code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl std::fmt::Display) -> Self {
        CliError {
            code: code.into(),
            message: message.to_string(),
        }
    }
}

/// What `--format structured` prints on failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub error: CliError,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let format = cli.format;
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| commands::dispatch(cli, out, err)))
        .unwrap_or_else(|p| {
            let what = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_default();
            Err(CliError::new("cli.Internal", format!("internal error: {what}")))
        });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error[{}]: {}", e.code, e.message);
            if format == Format::Structured {
                let doc = ErrorDocument { error: e };
                let _ = writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&doc).expect("error documents serialize")
                );
            }
            EXIT_DOMAIN
        }
    }
}
