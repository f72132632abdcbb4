//! Bug-inducing commit labelling with the base SZZ heuristic.
//!
//! Bugs are linked to the commits that fixed them. The pre-image lines each
//! fix deleted or edited are blamed as of the fix's parent, and the blamed
//! commits that predate the bug report become bug-inducing.
//!
//! [`RepoModel`] replays the commit history once and keeps, for every
//! version of every path, the commit that last touched each line. Renames
//! (`move_add`) and branches copy the line origins of their source path, so
//! blame follows a file across moves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{BugReport, Commit, FileAction, FileChange, Hunk};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SzzError {
    #[error("duplicate commit id `{0}`")]
    DuplicateCommit(String),
    #[error("commit `{0}` is older than its parent")]
    NonMonotonicTimestamps(String),
    #[error("unknown commit `{0}`")]
    UnknownCommit(String),
    #[error("file `{file}` does not exist as of commit `{commit}`")]
    FileUnknownAtCommit { file: String, commit: String },
    #[error("line {line} is outside `{file}` as of commit `{commit}`")]
    LineOutOfRange { file: String, line: u32, commit: String },
    #[error("commit `{commit}`: hunk {hunk:?} does not fit `{file}` ({len} lines)")]
    HunkOutOfRange {
        commit: String,
        file: String,
        hunk: Hunk,
        len: usize,
    },
    #[error("commit `{0}` has no text changes with hunks")]
    NoTextChanges(String),
}

impl SzzError {
    pub fn code(&self) -> &'static str {
        match self {
            SzzError::DuplicateCommit(_) => "szz.DuplicateCommit",
            SzzError::NonMonotonicTimestamps(_) => "szz.NonMonotonicTimestamps",
            SzzError::UnknownCommit(_) => "szz.UnknownCommit",
            SzzError::FileUnknownAtCommit { .. } => "szz.FileUnknownAtCommit",
            SzzError::LineOutOfRange { .. } => "szz.LineOutOfRange",
            SzzError::HunkOutOfRange { .. } => "szz.HunkOutOfRange",
            SzzError::NoTextChanges(_) => "szz.NoTextChanges",
        }
    }
}

/// One version of a path, as left by a commit.
#[derive(Debug, Clone)]
pub struct FileVersion {
    pub commit: usize,
    pub action: FileAction,
    pub exists: bool,
    /// Index of the commit that last touched each line.
    pub origins: Arc<Vec<usize>>,
    pub content: Option<Arc<str>>,
}

impl FileVersion {
    pub fn line_count(&self) -> usize {
        self.origins.len()
    }
}

/// Linear commit history with a per-path line-origin index.
#[derive(Debug, Clone)]
pub struct RepoModel {
    commits: Vec<Commit>,
    index: HashMap<String, usize>,
    files: BTreeMap<String, Vec<FileVersion>>,
}

fn apply_hunks(base: &[usize], hunks: &[Hunk], origin: usize) -> Result<Vec<usize>, Hunk> {
    let mut out = Vec::with_capacity(base.len());
    let mut cursor = 0usize;
    for h in hunks {
        let start = h.old_start as usize - 1;
        let end = start + h.old_lines as usize;
        if start < cursor || end > base.len() {
            return Err(*h);
        }
        out.extend_from_slice(&base[cursor..start]);
        out.extend(std::iter::repeat_n(origin, h.new_lines as usize));
        cursor = end;
    }
    out.extend_from_slice(&base[cursor..]);
    Ok(out)
}

impl RepoModel {
    /// Replays `commits` in order. Timestamps must not decrease.
    pub fn build(commits: Vec<Commit>) -> Result<Self, SzzError> {
        let mut index = HashMap::with_capacity(commits.len());
        let mut files: BTreeMap<String, Vec<FileVersion>> = BTreeMap::new();
        for (i, c) in commits.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(SzzError::DuplicateCommit(c.id.clone()));
            }
            if i > 0 && c.timestamp < commits[i - 1].timestamp {
                return Err(SzzError::NonMonotonicTimestamps(c.id.clone()));
            }
            // sources are read from the state before this commit
            let mut staged = Vec::with_capacity(c.changes.len());
            for ch in &c.changes {
                staged.push((ch.path.clone(), Self::next_version(&files, c, i, ch)?));
            }
            for (path, v) in staged {
                files.entry(path).or_default().push(v);
            }
        }
        Ok(RepoModel { commits, index, files })
    }

    fn latest<'a>(files: &'a BTreeMap<String, Vec<FileVersion>>, path: &str) -> Option<&'a FileVersion> {
        files.get(path).and_then(|v| v.last()).filter(|v| v.exists)
    }

    fn next_version(
        files: &BTreeMap<String, Vec<FileVersion>>,
        commit: &Commit,
        idx: usize,
        ch: &FileChange,
    ) -> Result<FileVersion, SzzError> {
        let empty = Arc::new(Vec::new());
        let current = Self::latest(files, &ch.path);
        let source = ch.from_path.as_deref().and_then(|p| Self::latest(files, p));
        let (base, base_content): (Arc<Vec<usize>>, Option<Arc<str>>) = match ch.action {
            FileAction::Add => (empty.clone(), None),
            FileAction::Delete | FileAction::MoveDelete => {
                return Ok(FileVersion {
                    commit: idx,
                    action: ch.action,
                    exists: false,
                    origins: empty,
                    content: None,
                })
            }
            FileAction::MoveAdd | FileAction::Branch => source
                .or(current)
                .map(|v| (v.origins.clone(), v.content.clone()))
                .unwrap_or((empty.clone(), None)),
            FileAction::Edit => current
                .map(|v| (v.origins.clone(), v.content.clone()))
                .unwrap_or((empty.clone(), None)),
            FileAction::Integrate => current
                .or(source)
                .map(|v| (v.origins.clone(), v.content.clone()))
                .unwrap_or((empty.clone(), None)),
        };
        let origins = if !ch.hunks.is_empty() {
            let applied = apply_hunks(&base, &ch.hunks, idx).map_err(|hunk| SzzError::HunkOutOfRange {
                commit: commit.id.clone(),
                file: ch.path.clone(),
                hunk,
                len: base.len(),
            })?;
            Arc::new(applied)
        } else if ch.action == FileAction::Add {
            Arc::new(vec![idx; ch.lines_added as usize])
        } else {
            base
        };
        let content = match &ch.content {
            Some(text) => Some(Arc::from(text.as_str())),
            None if ch.hunks.is_empty() && ch.action != FileAction::Add => base_content,
            None => None,
        };
        Ok(FileVersion {
            commit: idx,
            action: ch.action,
            exists: true,
            origins,
            content,
        })
    }

    pub fn commits(&self) -> &[Commit] {
        &self.commits
    }

    pub fn len(&self) -> usize {
        self.commits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commits.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn commit(&self, idx: usize) -> &Commit {
        &self.commits[idx]
    }

    /// Every version of `path`, oldest first.
    pub fn versions(&self, path: &str) -> &[FileVersion] {
        self.files.get(path).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The version of `path` in effect after commit `as_of`, if it exists.
    pub fn file_at(&self, path: &str, as_of: usize) -> Option<&FileVersion> {
        let versions = self.files.get(path)?;
        let n = versions.partition_point(|v| v.commit <= as_of);
        versions[..n].last().filter(|v| v.exists)
    }

    /// The version of `path` in effect just before commit `idx`.
    pub fn file_before(&self, path: &str, idx: usize) -> Option<&FileVersion> {
        idx.checked_sub(1).and_then(|p| self.file_at(path, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkConfidence {
    ExplicitKey,
    TrackerField,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixLink {
    pub bug_id: String,
    pub fix_commit_id: String,
    pub confidence: LinkConfidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedBug {
    pub bug_id: String,
    pub reason: String,
}

/// Links bugs to fixing commits by issue key in the message or by the bug's
/// own fix field. Fixes dated before the bug was opened are ignored.
pub fn link_fixes(bugs: &[BugReport], commits: &[Commit]) -> (Vec<FixLink>, Vec<SkippedBug>) {
    let mut by_key: HashMap<&str, Vec<&Commit>> = HashMap::new();
    let by_id: HashMap<&str, &Commit> = commits.iter().map(|c| (c.id.as_str(), c)).collect();
    for c in commits {
        for k in &c.linked_issue_keys {
            by_key.entry(k.as_str()).or_default().push(c);
        }
    }
    let mut links = Vec::new();
    let mut skipped = Vec::new();
    for bug in bugs {
        let mut found: Vec<(&Commit, LinkConfidence)> = by_key
            .get(bug.id.as_str())
            .map(|cs| cs.iter().map(|c| (*c, LinkConfidence::ExplicitKey)).collect())
            .unwrap_or_default();
        if let Some(fix) = bug.fixed_by_commit.as_deref() {
            if !found.iter().any(|(c, _)| c.id == fix) {
                if let Some(c) = by_id.get(fix) {
                    found.push((c, LinkConfidence::TrackerField));
                }
            }
        }
        let before = found.len();
        found.retain(|(c, _)| c.timestamp.date_naive() >= bug.opened_on);
        if found.is_empty() {
            skipped.push(SkippedBug {
                bug_id: bug.id.clone(),
                reason: if before > 0 {
                    "every candidate fix predates the bug report".into()
                } else {
                    "no fixing commit found".into()
                },
            });
            continue;
        }
        found.sort_by_key(|(c, _)| c.timestamp);
        for (c, confidence) in found {
            links.push(FixLink {
                bug_id: bug.id.clone(),
                fix_commit_id: c.id.clone(),
                confidence,
            });
        }
    }
    (links, skipped)
}

/// Pre-image line numbers a fix deleted or edited, keyed by the pre-image
/// path. Pure insertions and binary files contribute nothing.
pub fn extract_modified_lines(fix: &Commit) -> Result<BTreeMap<String, BTreeSet<u32>>, SzzError> {
    let mut out: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    let mut any_text_hunks = false;
    for ch in &fix.changes {
        if !ch.is_text() || ch.hunks.is_empty() {
            continue;
        }
        any_text_hunks = true;
        let pre_path = match ch.action {
            FileAction::MoveAdd | FileAction::Branch => ch.from_path.clone().unwrap_or_else(|| ch.path.clone()),
            _ => ch.path.clone(),
        };
        for h in &ch.hunks {
            if h.old_lines == 0 {
                continue;
            }
            out.entry(pre_path.clone())
                .or_default()
                .extend(h.old_start..h.old_start + h.old_lines);
        }
    }
    if !any_text_hunks {
        return Err(SzzError::NoTextChanges(fix.id.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlameHit {
    pub line: u32,
    pub commit_id: String,
}

/// For each line of `file` as of commit `as_of`, the commit that last
/// modified it.
pub fn blame_trace(
    repo: &RepoModel,
    file: &str,
    lines: &BTreeSet<u32>,
    as_of: &str,
) -> Result<Vec<BlameHit>, SzzError> {
    let idx = repo
        .position(as_of)
        .ok_or_else(|| SzzError::UnknownCommit(as_of.to_string()))?;
    let version = repo.file_at(file, idx).ok_or_else(|| SzzError::FileUnknownAtCommit {
        file: file.to_string(),
        commit: as_of.to_string(),
    })?;
    lines
        .iter()
        .map(|&line| {
            let origin = line
                .checked_sub(1)
                .and_then(|l| version.origins.get(l as usize))
                .ok_or_else(|| SzzError::LineOutOfRange {
                    file: file.to_string(),
                    line,
                    commit: as_of.to_string(),
                })?;
            Ok(BlameHit {
                line,
                commit_id: repo.commit(*origin).id.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SzzConfig {
    /// Move candidates that are themselves fixes for other bugs to a
    /// separate suspects list instead of labelling them.
    #[serde(default)]
    pub suspect_partial_fixes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCommit {
    pub commit_id: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub inducing: Vec<CandidateCommit>,
    pub suspects: Vec<CandidateCommit>,
    pub excluded: Vec<CandidateCommit>,
}

/// Rules out candidates committed after the bug was opened, and (when
/// configured) sets aside candidates that fixed other bugs.
pub fn filter_candidates(
    candidates: &[CandidateCommit],
    bug: &BugReport,
    fixes_of_other_bugs: &BTreeSet<String>,
    config: SzzConfig,
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for c in candidates {
        if c.timestamp.date_naive() > bug.opened_on {
            out.excluded.push(c.clone());
        } else if config.suspect_partial_fixes && fixes_of_other_bugs.contains(&c.commit_id) {
            out.suspects.push(c.clone());
        } else {
            out.inducing.push(c.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub bug_id: String,
    pub fix_commit_id: String,
    pub file: String,
    /// Inclusive pre-image line range, as of the fix's parent.
    pub first_line: u32,
    pub last_line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InducingLabel {
    pub commit_id: String,
    pub is_bug_inducing: bool,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suspect {
    pub commit_id: String,
    pub bug_id: String,
    pub fix_commit_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SzzOutcome {
    pub labels: Vec<InducingLabel>,
    pub links: Vec<FixLink>,
    pub suspects: Vec<Suspect>,
    pub skipped: Vec<SkippedBug>,
}

impl SzzOutcome {
    pub fn inducing_ids(&self) -> BTreeSet<&str> {
        self.labels
            .iter()
            .filter(|l| l.is_bug_inducing)
            .map(|l| l.commit_id.as_str())
            .collect()
    }

    /// commit_id, is_bug_inducing, evidence count.
    pub fn labels_tsv(&self) -> String {
        let mut out = String::from("commit_id\tis_bug_inducing\tevidence_count\n");
        for l in &self.labels {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                l.commit_id,
                l.is_bug_inducing,
                l.evidence.len()
            ));
        }
        out
    }

    pub fn suspects_tsv(&self) -> String {
        let mut out = String::from("commit_id\tbug_id\tfix_commit_id\n");
        for s in &self.suspects {
            out.push_str(&format!("{}\t{}\t{}\n", s.commit_id, s.bug_id, s.fix_commit_id));
        }
        out
    }
}

fn line_ranges(lines: &[u32]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &l in lines {
        match out.last_mut() {
            Some((_, hi)) if *hi + 1 == l => *hi = l,
            _ => out.push((l, l)),
        }
    }
    out
}

/// Runs link → extract → blame → filter and labels every commit.
pub fn label_commits(repo: &RepoModel, bugs: &[BugReport], config: SzzConfig) -> Result<SzzOutcome, SzzError> {
    let (links, skipped) = link_fixes(bugs, repo.commits());
    let bug_by_id: HashMap<&str, &BugReport> = bugs.iter().map(|b| (b.id.as_str(), b)).collect();
    let mut fixes_by_bug: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for l in &links {
        fixes_by_bug
            .entry(l.bug_id.as_str())
            .or_default()
            .insert(l.fix_commit_id.clone());
    }
    let all_fixes: BTreeSet<&str> = links.iter().map(|l| l.fix_commit_id.as_str()).collect();

    let mut evidence: BTreeMap<String, Vec<Evidence>> = BTreeMap::new();
    let mut suspects = Vec::new();
    for link in &links {
        let bug = bug_by_id[link.bug_id.as_str()];
        let fix_idx = repo
            .position(&link.fix_commit_id)
            .ok_or_else(|| SzzError::UnknownCommit(link.fix_commit_id.clone()))?;
        if fix_idx == 0 {
            continue;
        }
        let parent = repo.commit(fix_idx - 1).id.clone();
        let modified = match extract_modified_lines(repo.commit(fix_idx)) {
            Ok(m) => m,
            Err(SzzError::NoTextChanges(_)) => continue,
            Err(e) => return Err(e),
        };
        let own_fixes = &fixes_by_bug[link.bug_id.as_str()];
        let others: BTreeSet<String> = all_fixes
            .iter()
            .filter(|f| !own_fixes.contains(**f))
            .map(|f| f.to_string())
            .collect();
        for (file, lines) in &modified {
            let hits = blame_trace(repo, file, lines, &parent)?;
            let mut by_commit: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
            for h in &hits {
                by_commit.entry(h.commit_id.as_str()).or_default().push(h.line);
            }
            let candidates: Vec<CandidateCommit> = by_commit
                .keys()
                .map(|id| CandidateCommit {
                    commit_id: id.to_string(),
                    timestamp: repo.commit(repo.position(id).expect("blamed commit")).timestamp,
                })
                .collect();
            let outcome = filter_candidates(&candidates, bug, &others, config);
            for c in outcome.inducing {
                let entry = evidence.entry(c.commit_id.clone()).or_default();
                for (lo, hi) in line_ranges(&by_commit[c.commit_id.as_str()]) {
                    entry.push(Evidence {
                        bug_id: bug.id.clone(),
                        fix_commit_id: link.fix_commit_id.clone(),
                        file: file.clone(),
                        first_line: lo,
                        last_line: hi,
                    });
                }
            }
            for c in outcome.suspects {
                let s = Suspect {
                    commit_id: c.commit_id,
                    bug_id: bug.id.clone(),
                    fix_commit_id: link.fix_commit_id.clone(),
                };
                if !suspects.contains(&s) {
                    suspects.push(s);
                }
            }
        }
    }
    let labels = repo
        .commits()
        .iter()
        .map(|c| {
            let ev = evidence.remove(&c.id).unwrap_or_default();
            InducingLabel {
                commit_id: c.id.clone(),
                is_bug_inducing: !ev.is_empty(),
                evidence: ev,
            }
        })
        .collect();
    Ok(SzzOutcome {
        labels,
        links,
        suspects,
        skipped,
    })
}

/// The date a bug was opened, for callers holding only an id.
pub fn opened_on(bugs: &[BugReport], id: &str) -> Option<NaiveDate> {
    bugs.iter().find(|b| b.id == id).map(|b| b.opened_on)
}
