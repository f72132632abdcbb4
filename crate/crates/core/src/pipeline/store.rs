//! Plain-file persistence: atomically written artifacts, a content-addressed
//! object copy of each, and an append-only run log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_RECORD_SCHEMA_VERSION: u32 = 1;

/// Env var naming an artifact (path relative to the store root) whose write
/// aborts the process after the temp file is written but before the rename.
pub const FAULT_ENV: &str = "QARISK_FAULT_ABORT_BEFORE_RENAME";

/// Prefix of in-flight temp files; never a final artifact name.
pub const PARTIAL_PREFIX: &str = ".partial-";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always returns the same instant.
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Path relative to the store root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Writes files under a root directory so that a final path only ever holds
/// complete content.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
    fault: Option<String>,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore {
            root: root.into(),
            fault: std::env::var(FAULT_ENV).ok().filter(|s| !s.is_empty()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes `bytes` to `rel` via a temp file in the same directory and a
    /// rename, then stores a copy under `objects/` keyed by digest.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> io::Result<ArtifactRef> {
        let path = self.path_of(rel);
        write_atomic(&path, bytes, self.fault.as_deref() == Some(rel))?;
        let sha256 = sha256_hex(bytes);
        let object = self.root.join("objects").join(&sha256[..2]).join(&sha256);
        if !object.exists() {
            write_atomic(&object, bytes, false)?;
        }
        Ok(ArtifactRef {
            path: rel.to_string(),
            sha256,
            bytes: bytes.len() as u64,
        })
    }

    pub fn read(&self, rel: &str) -> io::Result<Vec<u8>> {
        fs::read(self.path_of(rel))
    }

    pub fn read_string(&self, rel: &str) -> io::Result<String> {
        fs::read_to_string(self.path_of(rel))
    }
}

/// Temp file + fsync + rename. With `abort_before_rename` the process dies
/// between the two, which is how crash safety is exercised.
pub fn write_atomic(path: &Path, bytes: &[u8], abort_before_rename: bool) -> io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new().prefix(PARTIAL_PREFIX).tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    if abort_before_rename {
        // keep the temp file so the aftermath is visible
        let _ = tmp.keep();
        std::process::abort();
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Stage that produced it, or `ingest`, `collections`, `report`.
    pub stage: String,
    pub name: String,
    #[serde(flatten)]
    pub artifact: ArtifactRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub pipeline: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub status: RunOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RunFailure>,
    pub config_digest: String,
    /// Source id → sha256 of the file content.
    pub input_digests: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactEntry>,
    /// Summary metrics keyed `<stage>.<metric>`.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunRecord {
    /// Digest over all artifact digests, in record order.
    pub fn artifact_digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.artifacts {
            h.update(a.artifact.path.as_bytes());
            h.update([0]);
            h.update(a.artifact.sha256.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn artifact(&self, stage: &str, name: &str) -> Option<&ArtifactRef> {
        self.artifacts
            .iter()
            .find(|a| a.stage == stage && a.name == name)
            .map(|a| &a.artifact)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            run_id: self.run_id.clone(),
            pipeline: self.pipeline.clone(),
            started_at: self.started_at,
            finished_at: self.finished_at,
            status: self.status,
            failed_stage: self.failed_stage.clone(),
            artifact_digest: self.artifact_digest(),
            metrics: self.metrics.clone(),
        }
    }
}

/// What the trend endpoint serves per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub pipeline: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub status: RunOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub artifact_digest: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run log: {0}")]
    Io(#[from] io::Error),
    #[error("run log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("no runs recorded for pipeline `{0}`")]
    UnknownPipeline(String),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io(_) => "pipeline.StoreIo",
            StoreError::Corrupt { .. } => "pipeline.CorruptRunLog",
            StoreError::UnknownPipeline(_) => "pipeline.UnknownPipeline",
        }
    }
}

/// The append-only run log, `runs.ndjson` under the store root. Appends
/// take an exclusive file lock; reads take a shared one.
#[derive(Debug, Clone)]
pub struct RunStore {
    path: PathBuf,
}

impl RunStore {
    pub fn new(root: &Path) -> Self {
        RunStore {
            path: root.join("runs.ndjson"),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends the record as one line, first assigning the next run id for
    /// its pipeline when `run_id` is empty.
    pub fn append(&self, record: &mut RunRecord) -> Result<(), StoreError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&self.path)?;
        file.lock()?;
        let mut text = String::new();
        (&file).read_to_string(&mut text)?;
        let existing = parse_log(&text)?;
        if record.run_id.is_empty() {
            record.run_id = next_run_id(&existing, &record.pipeline);
        }
        let mut line = serde_json::to_string(record).expect("run records serialize");
        line.push('\n');
        // a torn last line from a crashed writer gets its own line
        if !text.is_empty() && !text.ends_with('\n') {
            line.insert(0, '\n');
        }
        file.write_all(line.as_bytes())?;
        file.sync_all()?;
        file.unlock()?;
        Ok(())
    }

    /// Every record in log order.
    pub fn records(&self) -> Result<Vec<RunRecord>, StoreError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        file.lock_shared()?;
        let mut text = String::new();
        (&file).read_to_string(&mut text)?;
        file.unlock()?;
        parse_log(&text)
    }

    pub fn latest(&self, pipeline: &str) -> Result<Option<RunRecord>, StoreError> {
        Ok(self.records()?.into_iter().rev().find(|r| r.pipeline == pipeline))
    }

    /// Most recent successful run of `pipeline`.
    pub fn latest_succeeded(&self, pipeline: &str) -> Result<Option<RunRecord>, StoreError> {
        Ok(self
            .records()?
            .into_iter()
            .rev()
            .find(|r| r.pipeline == pipeline && r.status == RunOutcome::Succeeded))
    }
}

pub fn next_run_id(records: &[RunRecord], pipeline: &str) -> String {
    let seq = records.iter().filter(|r| r.pipeline == pipeline).count() + 1;
    format!("{pipeline}-{seq:06}")
}

/// Parses log text; an unterminated final line is an interrupted append and
/// is ignored, any other bad line is an error.
pub fn parse_log(text: &str) -> Result<Vec<RunRecord>, StoreError> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => {}
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Inclusive date range over run start times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRange {
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl RunRange {
    pub fn contains(&self, at: DateTime<Utc>) -> bool {
        let d = at.date_naive();
        self.from.is_none_or(|f| d >= f) && self.to.is_none_or(|t| d <= t)
    }
}

/// Summaries of `pipeline`'s runs in start-time order (log order on ties).
pub fn summarize(
    records: &[RunRecord],
    pipeline: &str,
    range: Option<RunRange>,
) -> Result<Vec<RunSummary>, StoreError> {
    if !records.iter().any(|r| r.pipeline == pipeline) {
        return Err(StoreError::UnknownPipeline(pipeline.to_string()));
    }
    let mut out: Vec<RunSummary> = records
        .iter()
        .filter(|r| r.pipeline == pipeline)
        .filter(|r| range.is_none_or(|g| g.contains(r.started_at)))
        .map(RunRecord::summary)
        .collect();
    out.sort_by_key(|s| s.started_at);
    Ok(out)
}

pub fn history_query(store: &RunStore, pipeline: &str, range: Option<RunRange>) -> Result<Vec<RunSummary>, StoreError> {
    summarize(&store.records()?, pipeline, range)
}
