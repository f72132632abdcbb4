//! Source adapters: each turns one input file into typed records.

use serde::Deserialize;
use serde_json::{json, Value};

use crate::model::{
    parse_records, validate_record, Dataset, Record, RecordLineError, ValidationContext, ValidationError,
};

use super::config::AdapterKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {error}")]
    Record { path: String, error: RecordLineError },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::Io { .. } => "pipeline.SourceUnreadable",
            IngestError::Record { error, .. } => error.error.code(),
            IngestError::Malformed { .. } => "pipeline.MalformedSource",
        }
    }
}

/// Parses `text` with the given adapter; `path` only labels errors.
pub fn ingest_text(
    adapter: AdapterKind,
    path: &str,
    text: &str,
    ctx: &ValidationContext,
) -> Result<Dataset, IngestError> {
    match adapter {
        AdapterKind::Records => parse_records(text, ctx).map_err(|error| IngestError::Record {
            path: path.into(),
            error,
        }),
        AdapterKind::TelemetryCsv => telemetry_csv(path, text, ctx),
        AdapterKind::VcsLog => vcs_log(path, text, ctx),
    }
}

fn as_record(path: &str, line: usize, doc: &Value, ctx: &ValidationContext) -> Result<Record, IngestError> {
    validate_record(doc, ctx).map_err(|error: ValidationError| IngestError::Record {
        path: path.into(),
        error: RecordLineError { line, error },
    })
}

#[derive(Deserialize)]
struct TelemetryRow {
    area: String,
    avg_distribution: f64,
    avg_stickiness: f64,
    from: String,
    to: String,
}

fn telemetry_csv(path: &str, text: &str, ctx: &ValidationContext) -> Result<Dataset, IngestError> {
    let mut ds = Dataset::default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    for (i, row) in reader.deserialize::<TelemetryRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| IngestError::Malformed {
            path: path.into(),
            line,
            message: e.to_string(),
        })?;
        let doc = json!({
            "type": "telemetry",
            "area": row.area,
            "avg_distribution": row.avg_distribution,
            "avg_stickiness": row.avg_stickiness,
            "window": { "from": row.from, "to": row.to },
        });
        ds.push(as_record(path, line, &doc, ctx)?);
    }
    Ok(ds)
}

#[derive(Default)]
struct PendingChange {
    old_path: Option<String>,
    new_path: Option<String>,
    new_file: bool,
    deleted: bool,
    rename: bool,
    copy: bool,
    binary: bool,
    hunks: Vec<Value>,
}

impl PendingChange {
    fn into_docs(self) -> Vec<Value> {
        let storage = if self.binary { "binary" } else { "text" };
        let old = self.old_path.clone().unwrap_or_default();
        let new = self.new_path.clone().unwrap_or_else(|| old.clone());
        let doc = |path: &str, action: &str, from: Option<&str>, hunks: &[Value]| {
            let mut d = json!({ "path": path, "action": action, "storage_type": storage, "hunks": hunks });
            if let Some(f) = from {
                d["from_path"] = json!(f);
            }
            d
        };
        if self.rename {
            vec![
                doc(&old, "move_delete", None, &[]),
                doc(&new, "move_add", Some(&old), &self.hunks),
            ]
        } else if self.copy {
            vec![doc(&new, "branch", Some(&old), &self.hunks)]
        } else if self.new_file {
            vec![doc(&new, "add", None, &self.hunks)]
        } else if self.deleted {
            vec![doc(&old, "delete", None, &self.hunks)]
        } else {
            vec![doc(&new, "edit", None, &self.hunks)]
        }
    }
}

#[derive(Default)]
struct PendingCommit {
    line: usize,
    id: String,
    author: String,
    date: String,
    message: Vec<String>,
    changes: Vec<PendingChange>,
}

impl PendingCommit {
    fn into_doc(self) -> Value {
        let changes: Vec<Value> = self.changes.into_iter().flat_map(PendingChange::into_docs).collect();
        json!({
            "type": "commit",
            "id": self.id,
            "author": self.author,
            "timestamp": self.date,
            "message": self.message.join("\n"),
            "changes": changes,
        })
    }
}

fn strip_prefix_path(s: &str, prefix: &str) -> Option<String> {
    let s = s.trim_end();
    if s == "/dev/null" {
        return None;
    }
    Some(s.strip_prefix(prefix).unwrap_or(s).to_string())
}

/// `-a[,b]` or `+c[,d]` into (start, count); a missing count means 1.
fn range(s: &str) -> Option<(u32, u32)> {
    let s = &s[1..];
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn hunk_header(line: &str) -> Option<Value> {
    let mut parts = line.split_whitespace();
    parts.next()?;
    let (old_start, old_lines) = range(parts.next()?)?;
    let (_, new_lines) = range(parts.next()?)?;
    // a pure insertion `-k,0` goes after line k
    let start = if old_lines == 0 { old_start + 1 } else { old_start };
    Some(json!([start, old_lines, new_lines]))
}

/// Converts `git log -p --unified=0 --date=iso-strict` output. Merge commits
/// and commits without file changes are dropped; the result is sorted by
/// timestamp with ties in oldest-first log order.
fn vcs_log(path: &str, text: &str, ctx: &ValidationContext) -> Result<Dataset, IngestError> {
    let malformed = |line: usize, message: &str| IngestError::Malformed {
        path: path.into(),
        line,
        message: message.into(),
    };
    let mut commits: Vec<PendingCommit> = Vec::new();
    let mut in_message = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(rest) = line.strip_prefix("commit ") {
            let id = rest.split_whitespace().next().unwrap_or_default().to_string();
            commits.push(PendingCommit {
                line: n,
                id,
                ..Default::default()
            });
            in_message = false;
            continue;
        }
        let Some(c) = commits.last_mut() else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(malformed(n, "content before the first `commit` line"));
        };
        if let Some(rest) = line.strip_prefix("Author:") {
            let rest = rest.trim();
            c.author = rest.split(" <").next().unwrap_or(rest).to_string();
        } else if let Some(rest) = line.strip_prefix("AuthorDate:").or_else(|| line.strip_prefix("Date:")) {
            c.date = rest.trim().to_string();
        } else if line.starts_with("Merge:") || line.starts_with("Commit:") || line.starts_with("CommitDate:") {
        } else if let Some(msg) = line.strip_prefix("    ") {
            if c.changes.is_empty() {
                in_message = true;
                c.message.push(msg.to_string());
            }
        } else if let Some(rest) = line.strip_prefix("diff --git ") {
            in_message = false;
            let mut parts = rest.splitn(2, " b/");
            let old = parts.next().map(|s| s.trim_start_matches("a/").to_string());
            let new = parts.next().map(str::to_string);
            c.changes.push(PendingChange {
                old_path: old,
                new_path: new,
                ..Default::default()
            });
        } else if let Some(ch) = c.changes.last_mut() {
            if line.starts_with("new file mode") {
                ch.new_file = true;
            } else if line.starts_with("deleted file mode") {
                ch.deleted = true;
            } else if let Some(p) = line.strip_prefix("rename from ") {
                ch.rename = true;
                ch.old_path = Some(p.to_string());
            } else if let Some(p) = line.strip_prefix("rename to ") {
                ch.new_path = Some(p.to_string());
            } else if let Some(p) = line.strip_prefix("copy from ") {
                ch.copy = true;
                ch.old_path = Some(p.to_string());
            } else if let Some(p) = line.strip_prefix("copy to ") {
                ch.new_path = Some(p.to_string());
            } else if line.starts_with("Binary files ") || line == "GIT binary patch" {
                ch.binary = true;
            } else if let Some(p) = line.strip_prefix("--- ") {
                if let Some(p) = strip_prefix_path(p, "a/") {
                    ch.old_path = Some(p);
                }
            } else if let Some(p) = line.strip_prefix("+++ ") {
                if let Some(p) = strip_prefix_path(p, "b/") {
                    ch.new_path = Some(p);
                }
            } else if line.starts_with("@@ ") {
                ch.hunks
                    .push(hunk_header(line).ok_or_else(|| malformed(n, "bad hunk header"))?);
            }
            // content, index and mode lines carry nothing the model keeps
        } else if !in_message && !line.trim().is_empty() {
            return Err(malformed(n, "unexpected line in commit header"));
        }
    }

    // git prints newest first
    commits.reverse();
    let mut records = Vec::new();
    for c in commits {
        if c.changes.is_empty() {
            continue;
        }
        let line = c.line;
        match as_record(path, line, &c.into_doc(), ctx)? {
            Record::Commit(commit) => records.push(commit),
            _ => unreachable!("commit documents validate to commits"),
        }
    }
    records.sort_by_key(|c| c.timestamp);
    let ds = Dataset {
        commits: records,
        ..Default::default()
    };
    ds.check_unique_ids().map_err(|error| IngestError::Record {
        path: path.into(),
        error: RecordLineError { line: 0, error },
    })?;
    Ok(ds)
}
