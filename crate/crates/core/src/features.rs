//! Per-commit feature vectors for defect prediction.
//!
//! The schema is fixed for a given [`FEATURE_SCHEMA_VERSION`]:
//!
//! * history-tracked counts, each followed by `<name>User`, the author's mean
//!   over their earlier commits;
//! * plain scalars;
//! * before/after metrics, each followed by `<name>Prev` (value at the parent);
//! * per-file arrays reduced to `Min`, `Max`, `Mean`, `Median`;
//! * per-code-file arrays reduced the same way, before and after.
//!
//! Extraction is streaming: a [`UserHistory`] is fed commits in order and only
//! ever sees the past, so a single pass gives the same vectors as recomputing
//! history from scratch for every commit.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codemetrics::{code_metrics, CodeMetrics};
use crate::model::{file_extension, Commit, FileAction, FileChange, StorageType};
use crate::szz::{FileVersion, RepoModel};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;

/// Counts that also get a per-author historical mean.
pub const USER_TRACKED: [&str; 17] = [
    "nFiles",
    "nCodeFiles",
    "nUniqueDir",
    "nWorkDir",
    "nLinesAdded",
    "nLinesEdited",
    "nLinesDeleted",
    "nLinesModified",
    "nLinesAddedNewFiles",
    "nLinesDeletedRemovedFiles",
    "nActionAdd",
    "nActionEdit",
    "nActionDelete",
    "nActionMoveAdd",
    "nActionMoveDelete",
    "nActionBranch",
    "nActionIntegrate",
];

pub const SCALARS: [&str; 10] = [
    "nFileTypes",
    "nCodeFileTypes",
    "entropy",
    "nP4TypeText",
    "nP4TypeUtf",
    "nP4TypeBinary",
    "fileSizeTotal",
    "developersTotal",
    "ageUser",
    "codeComplexityAboveThresholdDiff",
];

/// Summed over the commit's files, with the parent's value alongside.
pub const WITH_PREV: [&str; 5] = [
    "nLinesTotal",
    "nFunctions",
    "nFunctionParameters",
    "nComments",
    "nImports",
];

/// Per-file arrays, reduced to spread statistics.
pub const SPREAD: [&str; 6] = [
    "revision",
    "fileSize",
    "pathDepth",
    "lastModifiedElapsed",
    "developers",
    "ageCodeFile",
];

/// Per-code-file arrays, reduced to spread statistics before and after.
pub const SPREAD_WITH_PREV: [&str; 2] = ["nTokens", "codeComplexity"];

const SPREAD_SUFFIXES: [&str; 4] = ["Min", "Max", "Mean", "Median"];

/// Expanded column names in vector order.
pub fn feature_names() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut v = Vec::new();
        for n in USER_TRACKED {
            v.push(n.to_string());
            v.push(format!("{n}User"));
        }
        v.extend(SCALARS.iter().map(|s| s.to_string()));
        for n in WITH_PREV {
            v.push(n.to_string());
            v.push(format!("{n}Prev"));
        }
        for n in SPREAD {
            v.extend(SPREAD_SUFFIXES.iter().map(|s| format!("{n}{s}")));
        }
        for n in SPREAD_WITH_PREV {
            v.extend(SPREAD_SUFFIXES.iter().map(|s| format!("{n}{s}")));
            v.extend(SPREAD_SUFFIXES.iter().map(|s| format!("{n}Prev{s}")));
        }
        v
    })
}

pub fn feature_dim() -> usize {
    feature_names().len()
}

/// Short digest of the version and column names; models record it so that a
/// model is never applied to vectors of another shape.
pub fn schema_hash() -> String {
    let mut h = Sha256::new();
    h.update(FEATURE_SCHEMA_VERSION.to_le_bytes());
    for n in feature_names() {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("spread of an empty array")]
    EmptyArray,
    #[error("entropy needs at least one positive modification count")]
    AllZeroModifications,
    #[error("modification counts must be finite and non-negative")]
    InvalidCount,
    #[error("commit index {0} is out of range")]
    UnknownCommit(usize),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl FeatureError {
    pub fn code(&self) -> &'static str {
        match self {
            FeatureError::EmptyArray => "features.EmptyArray",
            FeatureError::AllZeroModifications => "features.AllZeroModifications",
            FeatureError::InvalidCount => "features.InvalidCount",
            FeatureError::UnknownCommit(_) => "features.UnknownCommit",
            FeatureError::Dataset(_) => "features.Dataset",
        }
    }
}

/// Normalized Shannon entropy of per-file modification counts, in [0, 1].
pub fn entropy(counts: &[f64]) -> Result<f64, FeatureError> {
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(FeatureError::InvalidCount);
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(FeatureError::AllZeroModifications);
    }
    if counts.len() < 2 {
        return Ok(0.0);
    }
    let h: f64 = counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (counts.len() as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

impl Spread {
    pub const ZERO: Spread = Spread {
        min: 0.0,
        max: 0.0,
        mean: 0.0,
        median: 0.0,
    };

    fn push_into(&self, out: &mut Vec<f64>) {
        out.extend([self.min, self.max, self.mean, self.median]);
    }
}

pub fn spread(values: &[f64]) -> Result<Spread, FeatureError> {
    if values.is_empty() {
        return Err(FeatureError::EmptyArray);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(Spread {
        min: sorted[0],
        max: sorted[n - 1],
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
    })
}

fn spread_or_zero(values: &[f64]) -> Spread {
    spread(values).unwrap_or(Spread::ZERO)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Complexity above which a file counts as crossing into "complex".
    pub complexity_threshold: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            complexity_threshold: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AuthorAggregate {
    sums: [f64; USER_TRACKED.len()],
    commits: u64,
    first_commit_at: DateTime<Utc>,
}

/// Running per-author aggregates over commits already seen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserHistory {
    authors: HashMap<String, AuthorAggregate>,
}

impl UserHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mean of each tracked count over the author's earlier commits; zeros
    /// for a first commit.
    pub fn means(&self, author: &str) -> [f64; USER_TRACKED.len()] {
        match self.authors.get(author) {
            Some(a) if a.commits > 0 => a.sums.map(|s| s / a.commits as f64),
            _ => [0.0; USER_TRACKED.len()],
        }
    }

    pub fn first_commit_at(&self, author: &str) -> Option<DateTime<Utc>> {
        self.authors.get(author).map(|a| a.first_commit_at)
    }

    pub fn commits_by(&self, author: &str) -> u64 {
        self.authors.get(author).map_or(0, |a| a.commits)
    }

    pub fn record(&mut self, author: &str, at: DateTime<Utc>, tracked: &[f64; USER_TRACKED.len()]) {
        let a = self.authors.entry(author.to_string()).or_insert(AuthorAggregate {
            sums: [0.0; USER_TRACKED.len()],
            commits: 0,
            first_commit_at: at,
        });
        for (s, v) in a.sums.iter_mut().zip(tracked) {
            *s += v;
        }
        a.commits += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub commit_id: String,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FeatureRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        feature_names().iter().position(|n| n == name).map(|i| self.values[i])
    }

    /// The history-tracked counts, in [`USER_TRACKED`] order.
    pub fn tracked(&self) -> [f64; USER_TRACKED.len()] {
        std::array::from_fn(|k| self.values[2 * k])
    }
}

fn days(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    ((to - from).num_seconds() as f64 / 86_400.0).max(0.0)
}

fn parent_dir(path: &str) -> &str {
    path.rsplit_once('/').map_or("", |(d, _)| d)
}

fn top_dir(path: &str) -> &str {
    path.split_once('/').map_or("", |(d, _)| d)
}

/// The version a change was made against, if any.
fn pre_image<'a>(repo: &'a RepoModel, idx: usize, ch: &FileChange) -> Option<&'a FileVersion> {
    let own = || repo.file_before(&ch.path, idx);
    let source = || ch.from_path.as_deref().and_then(|p| repo.file_before(p, idx));
    match ch.action {
        FileAction::Add => None,
        FileAction::MoveAdd | FileAction::Branch => source().or_else(own),
        FileAction::Integrate => own().or_else(source),
        FileAction::Edit | FileAction::Delete | FileAction::MoveDelete => own(),
    }
}

fn metrics_of(version: Option<&FileVersion>) -> CodeMetrics {
    version
        .and_then(|v| v.content.as_deref())
        .map(code_metrics)
        .unwrap_or(CodeMetrics::ABSENT)
}

/// Feature vector for the commit at `idx`. `history` must hold exactly the
/// commits before it.
pub fn extract_features(
    repo: &RepoModel,
    idx: usize,
    history: &UserHistory,
    config: &FeatureConfig,
) -> Result<FeatureRow, FeatureError> {
    if idx >= repo.len() {
        return Err(FeatureError::UnknownCommit(idx));
    }
    let commit: &Commit = repo.commit(idx);
    let now = commit.timestamp;
    let changes = &commit.changes;
    let mut warnings = Vec::new();

    let count = |pred: &dyn Fn(&FileChange) -> bool| changes.iter().filter(|c| pred(c)).count() as f64;
    let sum = |f: &dyn Fn(&FileChange) -> u32| changes.iter().map(|c| f64::from(f(c))).sum::<f64>();
    let action = |a: FileAction| count(&|c| c.action == a);

    let unique_dirs: BTreeSet<&str> = changes.iter().map(|c| parent_dir(&c.path)).collect();
    let work_dirs: BTreeSet<&str> = changes.iter().map(|c| top_dir(&c.path)).collect();
    let added = sum(&|c| c.lines_added);
    let edited = sum(&|c| c.lines_edited);
    let deleted = sum(&|c| c.lines_deleted);
    let tracked: [f64; USER_TRACKED.len()] = [
        changes.len() as f64,
        count(&|c| c.is_code),
        unique_dirs.len() as f64,
        work_dirs.len() as f64,
        added,
        edited,
        deleted,
        added + edited + deleted,
        sum(&|c| {
            if matches!(c.action, FileAction::Add | FileAction::Branch) {
                c.lines_added
            } else {
                0
            }
        }),
        sum(&|c| {
            if c.action == FileAction::Delete {
                c.lines_deleted
            } else {
                0
            }
        }),
        action(FileAction::Add),
        action(FileAction::Edit),
        action(FileAction::Delete),
        action(FileAction::MoveAdd),
        action(FileAction::MoveDelete),
        action(FileAction::Branch),
        action(FileAction::Integrate),
    ];
    let user = history.means(&commit.author);

    let ext = |c: &FileChange| file_extension(&c.path).map(str::to_ascii_lowercase).unwrap_or_default();
    let file_types: BTreeSet<String> = changes.iter().map(ext).collect();
    let code_types: BTreeSet<String> = changes.iter().filter(|c| c.is_code).map(ext).collect();
    let modifications: Vec<f64> = changes.iter().map(|c| c.modified_lines() as f64).collect();

    // per-file arrays
    let mut revision = Vec::with_capacity(changes.len());
    let mut file_size = Vec::with_capacity(changes.len());
    let mut path_depth = Vec::with_capacity(changes.len());
    let mut last_modified = Vec::with_capacity(changes.len());
    let mut developers = Vec::with_capacity(changes.len());
    let mut age = Vec::with_capacity(changes.len());
    let mut all_developers: BTreeSet<&str> = BTreeSet::new();
    let mut totals = [0.0f64; 10];
    let (mut tokens, mut tokens_prev, mut complexity, mut complexity_prev) = (vec![], vec![], vec![], vec![]);
    let mut crossed = 0u32;

    for ch in changes {
        let versions = repo.versions(&ch.path);
        let upto = &versions[..versions.partition_point(|v| v.commit <= idx)];
        revision.push(upto.len() as f64);
        file_size.push(ch.file_size as f64);
        path_depth.push(ch.path.matches('/').count() as f64);
        let pre = pre_image(repo, idx, ch);
        last_modified.push(pre.map_or(0.0, |v| days(repo.commit(v.commit).timestamp, now)));
        let authors: BTreeSet<&str> = upto.iter().map(|v| repo.commit(v.commit).author.as_str()).collect();
        developers.push(authors.len() as f64);
        all_developers.extend(authors);
        let lineage = match ch.action {
            FileAction::MoveAdd | FileAction::Branch => ch.from_path.as_deref().unwrap_or(&ch.path),
            _ => &ch.path,
        };
        let born = repo
            .versions(lineage)
            .first()
            .filter(|v| v.commit <= idx)
            .map(|v| v.commit);
        age.push(born.map_or(0.0, |b| days(repo.commit(b).timestamp, now)));

        let post = repo.file_at(&ch.path, idx);
        totals[0] += post.map_or(0.0, |v| v.line_count() as f64);
        totals[1] += pre.map_or(0.0, |v| v.line_count() as f64);

        if ch.is_code && ch.storage_type != StorageType::Binary {
            if ch.action == FileAction::Add {
                warnings.push(format!(
                    "features.MissingPreImage: `{}` is new; previous metrics are 0",
                    ch.path
                ));
            }
            let after = metrics_of(post);
            let before = metrics_of(pre);
            for (k, (a, b)) in [
                (after.functions, before.functions),
                (after.function_parameters, before.function_parameters),
                (after.comments, before.comments),
                (after.imports, before.imports),
            ]
            .into_iter()
            .enumerate()
            {
                totals[2 + 2 * k] += f64::from(a);
                totals[3 + 2 * k] += f64::from(b);
            }
            tokens.push(f64::from(after.tokens));
            tokens_prev.push(f64::from(before.tokens));
            complexity.push(f64::from(after.complexity));
            complexity_prev.push(f64::from(before.complexity));
            if before.complexity <= config.complexity_threshold && after.complexity > config.complexity_threshold {
                crossed += 1;
            }
        }
    }

    let mut values = Vec::with_capacity(feature_dim());
    for (t, u) in tracked.iter().zip(user) {
        values.push(*t);
        values.push(u);
    }
    let storage = |s: StorageType| count(&|c| c.storage_type == s);
    values.extend([
        file_types.len() as f64,
        code_types.len() as f64,
        entropy(&modifications).unwrap_or(0.0),
        storage(StorageType::Text),
        storage(StorageType::Utf),
        storage(StorageType::Binary),
        changes.iter().map(|c| c.file_size as f64).sum(),
        all_developers.len() as f64,
        history
            .first_commit_at(&commit.author)
            .map_or(0.0, |first| days(first, now)),
        f64::from(crossed),
    ]);
    values.extend(totals);
    for arr in [&revision, &file_size, &path_depth, &last_modified, &developers, &age] {
        spread_or_zero(arr).push_into(&mut values);
    }
    for arr in [&tokens, &tokens_prev, &complexity, &complexity_prev] {
        spread_or_zero(arr).push_into(&mut values);
    }
    debug_assert_eq!(values.len(), feature_dim());

    Ok(FeatureRow {
        commit_id: commit.id.clone(),
        author: commit.author.clone(),
        timestamp: now,
        values,
        warnings,
    })
}

/// Streams commits in order, feeding the user history as it goes.
#[derive(Debug, Default)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    history: UserHistory,
    next: usize,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Self {
        FeatureExtractor {
            config,
            history: UserHistory::new(),
            next: 0,
        }
    }

    pub fn history(&self) -> &UserHistory {
        &self.history
    }

    /// Extracts the next commit of `repo`, or `None` at the end.
    pub fn next_row(&mut self, repo: &RepoModel) -> Option<Result<FeatureRow, FeatureError>> {
        if self.next >= repo.len() {
            return None;
        }
        let row = extract_features(repo, self.next, &self.history, &self.config);
        if let Ok(r) = &row {
            self.history.record(&r.author, r.timestamp, &r.tracked());
        }
        self.next += 1;
        Some(row)
    }
}

/// Feature vectors for every commit, optionally with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub schema_version: u32,
    pub names: Vec<String>,
    pub rows: Vec<FeatureRow>,
    pub labels: Option<Vec<bool>>,
}

impl FeatureTable {
    pub fn extract(repo: &RepoModel, config: FeatureConfig) -> Result<Self, FeatureError> {
        let mut ex = FeatureExtractor::new(config);
        let mut rows = Vec::with_capacity(repo.len());
        while let Some(r) = ex.next_row(repo) {
            rows.push(r?);
        }
        Ok(FeatureTable {
            schema_version: FEATURE_SCHEMA_VERSION,
            names: feature_names().to_vec(),
            rows,
            labels: None,
        })
    }

    /// Attaches labels by commit id; commits without a label are negative.
    pub fn with_labels(mut self, positive: &BTreeSet<&str>) -> Self {
        self.labels = Some(
            self.rows
                .iter()
                .map(|r| positive.contains(r.commit_id.as_str()))
                .collect(),
        );
        self
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.values.clone()).collect()
    }

    /// CSV with a `#schema_version=N;schema=HASH` first line, then a header of
    /// `commit_id`, the feature names and (when labelled) `label`.
    pub fn to_csv(&self) -> Result<String, FeatureError> {
        let err = |e: csv::Error| FeatureError::Dataset(e.to_string());
        let mut out = format!("#schema_version={};schema={}\n", self.schema_version, schema_hash()).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["commit_id".to_string()];
            header.extend(self.names.iter().cloned());
            if self.labels.is_some() {
                header.push("label".into());
            }
            w.write_record(&header).map_err(err)?;
            for (k, r) in self.rows.iter().enumerate() {
                let mut rec = vec![r.commit_id.clone()];
                rec.extend(r.values.iter().map(|v| v.to_string()));
                if let Some(l) = &self.labels {
                    rec.push(if l[k] { "1" } else { "0" }.into());
                }
                w.write_record(&rec).map_err(err)?;
            }
            w.flush().map_err(|e| FeatureError::Dataset(e.to_string()))?;
        }
        Ok(String::from_utf8(out).expect("csv output is UTF-8"))
    }

    /// Reads what [`FeatureTable::to_csv`] writes. Author and timestamp are
    /// not part of the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self, FeatureError> {
        let bad = |m: String| FeatureError::Dataset(m);
        let first = text.lines().next().unwrap_or_default();
        let stamp = first
            .strip_prefix("#schema_version=")
            .ok_or_else(|| bad("missing `#schema_version=` line".into()))?;
        let (version, hash) = stamp
            .split_once(";schema=")
            .ok_or_else(|| bad("malformed schema line".into()))?;
        let version: u32 = version
            .parse()
            .map_err(|_| bad(format!("bad schema version `{version}`")))?;
        if version != FEATURE_SCHEMA_VERSION || hash != schema_hash() {
            return Err(bad(format!(
                "schema {version}/{hash} does not match {FEATURE_SCHEMA_VERSION}/{}",
                schema_hash()
            )));
        }
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let dim = feature_dim();
        let labelled = match header.len() {
            n if n == dim + 1 => false,
            n if n == dim + 2 && &header[dim + 1] == "label" => true,
            n => return Err(bad(format!("expected {} or {} columns, found {n}", dim + 1, dim + 2))),
        };
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let values = (1..=dim)
                .map(|k| {
                    rec[k].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        bad(format!(
                            "row {}: column `{}` is not a finite number",
                            line + 1,
                            &header[k]
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if labelled {
                labels.push(match &rec[dim + 1] {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => return Err(bad(format!("row {}: bad label `{other}`", line + 1))),
                });
            }
            rows.push(FeatureRow {
                commit_id: rec[0].to_string(),
                author: String::new(),
                timestamp: DateTime::<Utc>::UNIX_EPOCH,
                values,
                warnings: Vec::new(),
            });
        }
        Ok(FeatureTable {
            schema_version: version,
            names: feature_names().to_vec(),
            rows,
            labels: labelled.then_some(labels),
        })
    }
}
