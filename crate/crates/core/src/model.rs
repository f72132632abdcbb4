//! Canonical domain records and their validation.
//!
//! Every ingested document is a single JSON object carrying a `"type"` tag
//! (`test_case`, `test_run`, `bug`, `commit`, `telemetry`). [`validate_record`]
//! turns such a document into a typed [`Record`] with all invariants checked.
//! Typed records serialize back into the same document shape, so a validated
//! record can be written out and re-ingested unchanged.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Default pattern for issue keys embedded in commit messages: an uppercase
/// project key, a hyphen, then digits (`ABC-42`).
pub const DEFAULT_ISSUE_KEY_PATTERN: &str = r"\b[A-Z][A-Z0-9]+-[0-9]+\b";

const CODE_EXTENSIONS: &[&str] = &[
    "c", "cc", "cpp", "cxx", "h", "hh", "hpp", "hxx", "inl", "cs", "java", "js", "ts", "rs", "go", "py", "lua", "m",
    "mm", "swift", "kt", "scala",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("document is not a JSON object: {0}")]
    MalformedDocument(String),
    #[error("unknown record type tag {0:?}")]
    UnknownTag(String),
    #[error("invariant violated on field `{field}`: {reason}")]
    InvariantViolation { field: String, reason: String },
    #[error("malformed date in field `{field}`: {value:?}")]
    MalformedDate { field: String, value: String },
}

impl ValidationError {
    pub fn code(&self) -> &'static str {
        match self {
            ValidationError::MalformedDocument(_) => "model.MalformedDocument",
            ValidationError::UnknownTag(_) => "model.UnknownTag",
            ValidationError::InvariantViolation { .. } => "model.InvariantViolation",
            ValidationError::MalformedDate { .. } => "model.MalformedDate",
        }
    }

    fn violation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError::InvariantViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Settings that validation depends on but the record itself does not carry.
#[derive(Debug, Clone)]
pub struct ValidationContext {
    pub today: NaiveDate,
    pub issue_key_pattern: Regex,
}

impl ValidationContext {
    pub fn new(today: NaiveDate) -> Self {
        Self {
            today,
            issue_key_pattern: Regex::new(DEFAULT_ISSUE_KEY_PATTERN).expect("static pattern"),
        }
    }

    pub fn with_issue_key_pattern(mut self, pattern: &str) -> Result<Self, regex::Error> {
        self.issue_key_pattern = Regex::new(pattern)?;
        Ok(self)
    }

    pub fn issue_keys(&self, message: &str) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for m in self.issue_key_pattern.find_iter(message) {
            if !keys.iter().any(|k| k == m.as_str()) {
                keys.push(m.as_str().to_string());
            }
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Passed,
    Failed,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BugStatus {
    Open,
    Addressed,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileAction {
    Add,
    Edit,
    Delete,
    MoveAdd,
    MoveDelete,
    Branch,
    Integrate,
}

impl FileAction {
    pub const ALL: [FileAction; 7] = [
        FileAction::Add,
        FileAction::Edit,
        FileAction::Delete,
        FileAction::MoveAdd,
        FileAction::MoveDelete,
        FileAction::Branch,
        FileAction::Integrate,
    ];

    /// Actions after which the path no longer exists.
    pub fn removes_path(self) -> bool {
        matches!(self, FileAction::Delete | FileAction::MoveDelete)
    }

    /// Actions that take their initial content from another path.
    pub fn copies_from_source(self) -> bool {
        matches!(self, FileAction::MoveAdd | FileAction::Branch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageType {
    Text,
    Utf,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub title: String,
    pub area: String,
    pub automated: bool,
    pub created_on: NaiveDate,
    /// Manually maintained inputs (quality targets and similar), keyed by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub manual: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub test_id: String,
    pub status: RunStatus,
    pub tested_on: NaiveDate,
    /// Hours.
    pub duration: f64,
    #[serde(default)]
    pub found_bug_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugReport {
    pub id: String,
    pub severity: u8,
    pub opened_on: NaiveDate,
    pub status: BugStatus,
    pub area: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_by_commit: Option<String>,
    /// Date the bug moved to `addressed`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addressed_on: Option<NaiveDate>,
}

/// One diff hunk: `old_lines` lines starting at 1-based pre-image line
/// `old_start` are replaced by `new_lines` lines. A pure insertion has
/// `old_lines == 0` and inserts before `old_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct Hunk {
    pub old_start: u32,
    pub old_lines: u32,
    pub new_lines: u32,
}

impl From<[u32; 3]> for Hunk {
    fn from(v: [u32; 3]) -> Self {
        Hunk {
            old_start: v[0],
            old_lines: v[1],
            new_lines: v[2],
        }
    }
}

impl From<Hunk> for [u32; 3] {
    fn from(h: Hunk) -> Self {
        [h.old_start, h.old_lines, h.new_lines]
    }
}

impl Hunk {
    pub fn new(old_start: u32, old_lines: u32, new_lines: u32) -> Self {
        Hunk {
            old_start,
            old_lines,
            new_lines,
        }
    }

    /// (added, deleted, edited) with edited lines paired one-to-one.
    pub fn line_counts(&self) -> (u32, u32, u32) {
        let edited = self.old_lines.min(self.new_lines);
        (self.new_lines - edited, self.old_lines - edited, edited)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    pub action: FileAction,
    pub storage_type: StorageType,
    pub lines_added: u32,
    pub lines_deleted: u32,
    pub lines_edited: u32,
    #[serde(default)]
    pub hunks: Vec<Hunk>,
    #[serde(default)]
    pub file_size: u64,
    pub is_code: bool,
    /// Source path for `move_add`, `branch` and `integrate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_path: Option<String>,
    /// Full post-change text, when the export carries it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

impl FileChange {
    pub fn modified_lines(&self) -> u64 {
        u64::from(self.lines_added) + u64::from(self.lines_deleted) + u64::from(self.lines_edited)
    }

    pub fn is_text(&self) -> bool {
        self.storage_type != StorageType::Binary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub id: String,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub message: String,
    pub changes: Vec<FileChange>,
    #[serde(default)]
    pub linked_issue_keys: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.from <= d && d <= self.to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub area: String,
    pub avg_distribution: f64,
    pub avg_stickiness: f64,
    pub window: DateRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    TestCase(TestCase),
    TestRun(TestRun),
    Bug(BugReport),
    Commit(Commit),
    Telemetry(TelemetryRecord),
}

impl Record {
    pub fn tag(&self) -> &'static str {
        match self {
            Record::TestCase(_) => "test_case",
            Record::TestRun(_) => "test_run",
            Record::Bug(_) => "bug",
            Record::Commit(_) => "commit",
            Record::Telemetry(_) => "telemetry",
        }
    }
}

/// Typed records grouped by kind, in ingestion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tests: Vec<TestCase>,
    pub runs: Vec<TestRun>,
    pub bugs: Vec<BugReport>,
    pub commits: Vec<Commit>,
    pub telemetry: Vec<TelemetryRecord>,
}

impl Dataset {
    pub fn push(&mut self, record: Record) {
        match record {
            Record::TestCase(t) => self.tests.push(t),
            Record::TestRun(r) => self.runs.push(r),
            Record::Bug(b) => self.bugs.push(b),
            Record::Commit(c) => self.commits.push(c),
            Record::Telemetry(t) => self.telemetry.push(t),
        }
    }

    pub fn len(&self) -> usize {
        self.tests.len() + self.runs.len() + self.bugs.len() + self.commits.len() + self.telemetry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One JSON record per line: tests, runs, bugs, commits, telemetry.
    pub fn to_ndjson(&self) -> String {
        let records = self
            .tests
            .iter()
            .cloned()
            .map(Record::TestCase)
            .chain(self.runs.iter().cloned().map(Record::TestRun))
            .chain(self.bugs.iter().cloned().map(Record::Bug))
            .chain(self.commits.iter().cloned().map(Record::Commit))
            .chain(self.telemetry.iter().cloned().map(Record::Telemetry));
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Checks the cross-record uniqueness rules (test and bug ids).
    pub fn check_unique_ids(&self) -> Result<(), ValidationError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tests {
            if !seen.insert(t.id.as_str()) {
                return Err(ValidationError::violation(
                    "id",
                    format!("duplicate test case id {:?}", t.id),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.bugs {
            if !seen.insert(b.id.as_str()) {
                return Err(ValidationError::violation("id", format!("duplicate bug id {:?}", b.id)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.commits {
            if !seen.insert(c.id.as_str()) {
                return Err(ValidationError::violation(
                    "id",
                    format!("duplicate commit id {:?}", c.id),
                ));
            }
        }
        Ok(())
    }
}

/// Line-level error from [`parse_records`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {error}")]
pub struct RecordLineError {
    pub line: usize,
    pub error: ValidationError,
}

/// Parses newline-delimited records. Blank lines are skipped.
pub fn parse_records(text: &str, ctx: &ValidationContext) -> Result<Dataset, RecordLineError> {
    let mut ds = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = validate_record_str(line, ctx).map_err(|error| RecordLineError { line: i + 1, error })?;
        ds.push(record);
    }
    ds.check_unique_ids()
        .map_err(|error| RecordLineError { line: 0, error })?;
    Ok(ds)
}

pub fn validate_record_str(text: &str, ctx: &ValidationContext) -> Result<Record, ValidationError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ValidationError::MalformedDocument(e.to_string()))?;
    validate_record(&value, ctx)
}

/// Validates one tagged document into a typed record.
pub fn validate_record(raw: &serde_json::Value, ctx: &ValidationContext) -> Result<Record, ValidationError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| ValidationError::MalformedDocument("expected an object".into()))?;
    let tag = match obj.get("type") {
        Some(serde_json::Value::String(s)) => s.as_str(),
        Some(other) => return Err(ValidationError::UnknownTag(other.to_string())),
        None => return Err(ValidationError::violation("type", "missing type tag")),
    };
    match tag {
        "test_case" => decode::<RawTestCase>(raw)
            .and_then(|r| r.validate(ctx))
            .map(Record::TestCase),
        "test_run" => decode::<RawTestRun>(raw)
            .and_then(|r| r.validate())
            .map(Record::TestRun),
        "bug" => decode::<RawBug>(raw).and_then(|r| r.validate()).map(Record::Bug),
        "commit" => decode::<RawCommit>(raw)
            .and_then(|r| r.validate(ctx))
            .map(Record::Commit),
        "telemetry" => decode::<RawTelemetry>(raw)
            .and_then(|r| r.validate())
            .map(Record::Telemetry),
        other => Err(ValidationError::UnknownTag(other.to_string())),
    }
}

fn decode<T: DeserializeOwned>(raw: &serde_json::Value) -> Result<T, ValidationError> {
    serde_path_to_error::deserialize(raw).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // serde reports missing fields at the parent path
        let field = match inner.strip_prefix("missing field `") {
            Some(rest) => rest.trim_end_matches('`').to_string(),
            None => path,
        };
        ValidationError::violation(field, inner)
    })
}

fn parse_date(field: &str, value: &str) -> Result<NaiveDate, ValidationError> {
    if let Ok(d) = NaiveDate::parse_from_str(value, "%Y-%m-%d") {
        return Ok(d);
    }
    DateTime::parse_from_rfc3339(value)
        .map(|dt| dt.with_timezone(&Utc).date_naive())
        .map_err(|_| ValidationError::MalformedDate {
            field: field.into(),
            value: value.into(),
        })
}

fn parse_timestamp(field: &str, value: &str) -> Result<DateTime<Utc>, ValidationError> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(value) {
        return Ok(dt.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
        .map_err(|_| ValidationError::MalformedDate {
            field: field.into(),
            value: value.into(),
        })
}

fn parse_enum<T: DeserializeOwned>(field: &str, value: &str, allowed: &str) -> Result<T, ValidationError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| ValidationError::violation(field, format!("{value:?} is not one of {allowed}")))
}

fn non_empty(field: &str, value: &str) -> Result<(), ValidationError> {
    if value.trim().is_empty() {
        Err(ValidationError::violation(field, "must not be empty"))
    } else {
        Ok(())
    }
}

fn finite_non_negative(field: &str, value: f64) -> Result<(), ValidationError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(ValidationError::violation(
            field,
            format!("{value} must be finite and >= 0"),
        ))
    }
}

fn fraction(field: &str, value: f64) -> Result<(), ValidationError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ValidationError::violation(field, format!("{value} outside [0, 1]")))
    }
}

#[derive(Deserialize)]
struct RawTestCase {
    id: String,
    #[serde(default)]
    title: String,
    area: String,
    #[serde(default)]
    automated: bool,
    created_on: String,
    #[serde(default)]
    manual: BTreeMap<String, f64>,
}

impl RawTestCase {
    fn validate(self, ctx: &ValidationContext) -> Result<TestCase, ValidationError> {
        non_empty("id", &self.id)?;
        let created_on = parse_date("created_on", &self.created_on)?;
        if created_on > ctx.today {
            return Err(ValidationError::violation("created_on", "date lies in the future"));
        }
        for (k, v) in &self.manual {
            if !v.is_finite() {
                return Err(ValidationError::violation(format!("manual.{k}"), "must be finite"));
            }
        }
        Ok(TestCase {
            id: self.id,
            title: self.title,
            area: self.area,
            automated: self.automated,
            created_on,
            manual: self.manual,
        })
    }
}

#[derive(Deserialize)]
struct RawTestRun {
    test_id: String,
    status: String,
    tested_on: String,
    duration: f64,
    #[serde(default)]
    found_bug_ids: Vec<String>,
}

impl RawTestRun {
    fn validate(self) -> Result<TestRun, ValidationError> {
        non_empty("test_id", &self.test_id)?;
        let status = parse_enum("status", &self.status, "{passed, failed, blocked}")?;
        let tested_on = parse_date("tested_on", &self.tested_on)?;
        finite_non_negative("duration", self.duration)?;
        Ok(TestRun {
            test_id: self.test_id,
            status,
            tested_on,
            duration: self.duration,
            found_bug_ids: self.found_bug_ids,
        })
    }
}

#[derive(Deserialize)]
struct RawBug {
    id: String,
    severity: i64,
    opened_on: String,
    status: String,
    #[serde(default)]
    area: String,
    #[serde(default)]
    fixed_by_commit: Option<String>,
    #[serde(default)]
    addressed_on: Option<String>,
}

impl RawBug {
    fn validate(self) -> Result<BugReport, ValidationError> {
        non_empty("id", &self.id)?;
        if !(1..=5).contains(&self.severity) {
            return Err(ValidationError::violation(
                "severity",
                format!("{} outside 1..5", self.severity),
            ));
        }
        let opened_on = parse_date("opened_on", &self.opened_on)?;
        let status: BugStatus = parse_enum("status", &self.status, "{open, addressed, closed}")?;
        if status == BugStatus::Open && self.fixed_by_commit.is_some() {
            return Err(ValidationError::violation(
                "fixed_by_commit",
                "an open bug cannot name a fix commit",
            ));
        }
        let addressed_on = self
            .addressed_on
            .as_deref()
            .map(|s| parse_date("addressed_on", s))
            .transpose()?;
        Ok(BugReport {
            id: self.id,
            severity: self.severity as u8,
            opened_on,
            status,
            area: self.area,
            fixed_by_commit: self.fixed_by_commit,
            addressed_on,
        })
    }
}

#[derive(Deserialize)]
struct RawFileChange {
    path: String,
    action: String,
    #[serde(default)]
    storage_type: Option<String>,
    #[serde(default)]
    lines_added: Option<u32>,
    #[serde(default)]
    lines_deleted: Option<u32>,
    #[serde(default)]
    lines_edited: Option<u32>,
    #[serde(default)]
    hunks: Vec<Hunk>,
    #[serde(default)]
    file_size: u64,
    #[serde(default)]
    is_code: Option<bool>,
    #[serde(default)]
    from_path: Option<String>,
    #[serde(default)]
    content: Option<String>,
}

/// Whether a path looks like source code, judged by its extension.
pub fn is_code_path(path: &str) -> bool {
    file_extension(path)
        .map(|ext| CODE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub fn file_extension(path: &str) -> Option<&str> {
    let name = path.rsplit('/').next().unwrap_or(path);
    match name.rfind('.') {
        Some(0) | None => None,
        Some(i) => Some(&name[i + 1..]),
    }
}

impl RawFileChange {
    fn validate(self, idx: usize) -> Result<FileChange, ValidationError> {
        let f = |name: &str| format!("changes[{idx}].{name}");
        non_empty(&f("path"), &self.path)?;
        let action: FileAction = parse_enum(
            &f("action"),
            &self.action,
            "{add, edit, delete, move_add, move_delete, branch, integrate}",
        )?;
        let storage_type: StorageType = match &self.storage_type {
            Some(s) => parse_enum(&f("storage_type"), s, "{text, utf, binary}")?,
            None => StorageType::Text,
        };

        let mut prev_end = 0u64;
        let (mut added, mut deleted, mut edited) = (0u32, 0u32, 0u32);
        for h in &self.hunks {
            if h.old_start == 0 {
                return Err(ValidationError::violation(f("hunks"), "hunk start lines are 1-based"));
            }
            if u64::from(h.old_start) < prev_end {
                return Err(ValidationError::violation(
                    f("hunks"),
                    "hunks overlap or are out of order",
                ));
            }
            prev_end = u64::from(h.old_start) + u64::from(h.old_lines);
            let (a, d, e) = h.line_counts();
            added += a;
            deleted += d;
            edited += e;
        }
        let has_hunks = !self.hunks.is_empty();
        let pick = |name: &str, given: Option<u32>, derived: u32| -> Result<u32, ValidationError> {
            match given {
                Some(v) if has_hunks && v != derived => Err(ValidationError::violation(
                    f(name),
                    format!("{v} disagrees with hunks ({derived})"),
                )),
                Some(v) => Ok(v),
                None => Ok(derived),
            }
        };
        let lines_added = pick("lines_added", self.lines_added, added)?;
        let lines_deleted = pick("lines_deleted", self.lines_deleted, deleted)?;
        let lines_edited = pick("lines_edited", self.lines_edited, edited)?;

        if action == FileAction::Add && (lines_deleted > 0 || lines_edited > 0) {
            return Err(ValidationError::violation(
                f("lines_deleted"),
                "an added file cannot delete lines",
            ));
        }
        if action == FileAction::Delete && (lines_added > 0 || lines_edited > 0) {
            return Err(ValidationError::violation(
                f("lines_added"),
                "a deleted file cannot add lines",
            ));
        }
        if matches!(action, FileAction::MoveAdd | FileAction::Branch) && self.from_path.is_none() {
            return Err(ValidationError::violation(
                f("from_path"),
                "required for move_add and branch",
            ));
        }
        if storage_type == StorageType::Binary && self.content.is_some() {
            return Err(ValidationError::violation(
                f("content"),
                "binary files carry no text content",
            ));
        }
        let is_code = self.is_code.unwrap_or_else(|| is_code_path(&self.path));
        Ok(FileChange {
            path: self.path,
            action,
            storage_type,
            lines_added,
            lines_deleted,
            lines_edited,
            hunks: self.hunks,
            file_size: self.file_size,
            is_code,
            from_path: self.from_path,
            content: self.content,
        })
    }
}

#[derive(Deserialize)]
struct RawCommit {
    id: String,
    author: String,
    timestamp: String,
    #[serde(default)]
    message: String,
    changes: Vec<RawFileChange>,
}

impl RawCommit {
    fn validate(self, ctx: &ValidationContext) -> Result<Commit, ValidationError> {
        non_empty("id", &self.id)?;
        non_empty("author", &self.author)?;
        let timestamp = parse_timestamp("timestamp", &self.timestamp)?;
        if self.changes.is_empty() {
            return Err(ValidationError::violation(
                "changes",
                "a commit must change at least one file",
            ));
        }
        let changes = self
            .changes
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.validate(i))
            .collect::<Result<Vec<_>, _>>()?;
        let linked_issue_keys = ctx.issue_keys(&self.message);
        Ok(Commit {
            id: self.id,
            author: self.author,
            timestamp,
            message: self.message,
            changes,
            linked_issue_keys,
        })
    }
}

#[derive(Deserialize)]
struct RawWindow {
    from: String,
    to: String,
}

#[derive(Deserialize)]
struct RawTelemetry {
    area: String,
    avg_distribution: f64,
    avg_stickiness: f64,
    window: RawWindow,
}

impl RawTelemetry {
    fn validate(self) -> Result<TelemetryRecord, ValidationError> {
        non_empty("area", &self.area)?;
        fraction("avg_distribution", self.avg_distribution)?;
        fraction("avg_stickiness", self.avg_stickiness)?;
        let from = parse_date("window.from", &self.window.from)?;
        let to = parse_date("window.to", &self.window.to)?;
        if from > to {
            return Err(ValidationError::violation("window", "from is after to"));
        }
        Ok(TelemetryRecord {
            area: self.area,
            avg_distribution: self.avg_distribution,
            avg_stickiness: self.avg_stickiness,
            window: DateRange { from, to },
        })
    }
}

/// Whole days from `from` to `to`, floored; negative when `to` precedes `from`.
pub fn days_between(from: NaiveDate, to: NaiveDate) -> i64 {
    (to - from).num_days()
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunStatus::Passed => "passed",
            RunStatus::Failed => "failed",
            RunStatus::Blocked => "blocked",
        };
        f.write_str(s)
    }
}
