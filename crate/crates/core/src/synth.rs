//! Seeded generators for synthetic data with known ground truth.
//!
//! * [`catalog`]: a test catalogue whose chance of exposing a bug in the next
//!   cycle grows with hidden probability, impact and staleness values that
//!   the observable criteria only approximate.
//! * [`repo`]: a commit history with planted inducing → fix chains. Fixes only
//!   touch lines the inducing commit wrote and nobody has touched since, so
//!   the planted set is exactly what a correct SZZ run must find.
//! * [`imbalanced_classification`]: labelled vectors at a chosen class ratio
//!   with a few informative features.
//!
//! Every generator is a pure function of its parameters.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::learn::TrainSet;
use crate::model::{
    file_extension, is_code_path, BugReport, BugStatus, Commit, Dataset, FileAction, FileChange, Hunk, RunStatus,
    StorageType, TestCase, TestRun, ValidationContext,
};
use crate::risk::CriteriaSet;

/// Criteria used with [`catalog`]. Two probability inputs, two impact inputs
/// and staleness as the time input.
pub const CATALOG_CRITERIA_TOML: &str = r#"
[[criteria]]
name = "failure_history"
kind = "probability"
weight = 0.6
normalization = { type = "ratio" }
source = { builtin = "script_failure_rate" }

[[criteria]]
name = "complexity"
kind = "probability"
weight = 0.4
normalization = { type = "passthrough" }
source = { manual = "complexity" }

[[criteria]]
name = "business_impact"
kind = "impact"
weight = 1.0
normalization = { type = "passthrough" }
source = { manual = "business_impact" }

[[criteria]]
name = "usage"
kind = "impact"
weight = 0.5
normalization = { type = "passthrough" }
source = { manual = "usage" }

[[criteria]]
name = "staleness"
kind = "time"
weight = 1.0
normalization = { type = "affine", src_lo = 0.0, src_hi = 60.0 }
source = { builtin = "days_since_last_tested" }
"#;

pub fn catalog_criteria() -> CriteriaSet {
    CriteriaSet::from_toml(CATALOG_CRITERIA_TOML).expect("bundled criteria are valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogParams {
    pub tests: usize,
    pub runs_per_test: usize,
    pub areas: Vec<String>,
    pub today: NaiveDate,
    pub seed: u64,
}

impl Default for CatalogParams {
    fn default() -> Self {
        CatalogParams {
            tests: 1100,
            runs_per_test: 8,
            areas: vec!["engine".into(), "game".into(), "tools".into()],
            today: NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCatalog {
    pub tests: Vec<TestCase>,
    pub runs: Vec<TestRun>,
    /// Chance that running the test next cycle exposes a bug.
    pub bug_probability: BTreeMap<String, f64>,
    /// Tests that would expose a bug next cycle, drawn from the above.
    pub planted: BTreeSet<String>,
}

fn clamp10(v: f64) -> f64 {
    v.clamp(0.0, 10.0)
}

pub fn catalog(params: &CatalogParams) -> SyntheticCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tests = Vec::with_capacity(params.tests);
    let mut runs = Vec::with_capacity(params.tests * params.runs_per_test);
    let mut bug_probability = BTreeMap::new();
    let mut planted = BTreeSet::new();
    for k in 0..params.tests {
        let id = format!("T{k:05}");
        let p_true: f64 = rng.random();
        let i_true: f64 = rng.random();
        let days_ago: i64 = rng.random_range(0..60);
        let t_true = days_ago as f64 / 60.0;
        let mut manual = BTreeMap::new();
        manual.insert(
            "complexity".to_string(),
            clamp10(10.0 * p_true + rng.random_range(-1.5..1.5)),
        );
        manual.insert(
            "business_impact".to_string(),
            clamp10(10.0 * i_true + rng.random_range(-1.5..1.5)),
        );
        manual.insert(
            "usage".to_string(),
            clamp10(10.0 * i_true + rng.random_range(-3.0..3.0)),
        );
        let area = params.areas[k % params.areas.len()].clone();
        let hours = rng.random_range(0.25..3.0);
        for r in 0..params.runs_per_test {
            let roll: f64 = rng.random();
            let status = if roll < 0.5 * p_true {
                RunStatus::Failed
            } else if roll < 0.5 * p_true + 0.03 {
                RunStatus::Blocked
            } else {
                RunStatus::Passed
            };
            runs.push(TestRun {
                test_id: id.clone(),
                status,
                tested_on: params.today - Duration::days(days_ago + 7 * r as i64),
                duration: hours,
                found_bug_ids: Vec::new(),
            });
        }
        let q = (p_true * i_true).powi(2) * (0.25 + 0.75 * t_true);
        if rng.random_bool(q) {
            planted.insert(id.clone());
        }
        bug_probability.insert(id.clone(), q);
        tests.push(TestCase {
            id,
            title: format!("synthetic test {k}"),
            area,
            automated: rng.random_bool(0.7),
            created_on: params.today - Duration::days(400),
            manual,
        });
    }
    SyntheticCatalog {
        tests,
        runs,
        bug_probability,
        planted,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepoParams {
    pub commits: usize,
    pub authors: usize,
    /// Chance that a commit plants a bug.
    pub inducing_rate: f64,
    /// Allow moves, branches and integrations.
    pub renames: bool,
    /// Attach post-image source text to code changes.
    pub content: bool,
    pub start: DateTime<Utc>,
    pub seed: u64,
}

impl Default for RepoParams {
    fn default() -> Self {
        RepoParams {
            commits: 30,
            authors: 5,
            inducing_rate: 0.2,
            renames: true,
            content: false,
            start: Utc.with_ymd_and_hms(2024, 1, 1, 12, 0, 0).single().expect("valid time"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRepo {
    pub commits: Vec<Commit>,
    pub bugs: Vec<BugReport>,
    /// Commits that induced a bug which was later fixed.
    pub planted_inducing: BTreeSet<String>,
    /// Fix commit for each planted bug.
    pub fixes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy)]
struct Line {
    id: u64,
    origin: usize,
}

#[derive(Debug, Clone)]
struct GenFile {
    lines: Vec<Line>,
    binary_size: Option<u64>,
}

struct Chain {
    bug_id: String,
    inducing: usize,
}

const DIRS: [&str; 5] = ["engine/core", "engine/render", "game/ui", "game/logic", "tools/build"];
const CODE_EXT: [&str; 4] = ["c", "cpp", "h", "cs"];

/// Deterministic source line for a line id.
pub fn line_text(id: u64) -> String {
    match id % 7 {
        0 => format!("int fn{id}(int a, int b) {{ return a + b; }}"),
        1 => format!("    if (x > {}) {{ y += {}; }}", id % 13, id % 5),
        2 => format!("    // note {id}"),
        3 => format!("#include \"mod{}.h\"", id % 17),
        4 => format!("    for (int i = 0; i < {}; i++) {{ total += i; }}", id % 9 + 1),
        5 => format!("    value = value * {} + {};", id % 7 + 1, id % 11),
        _ => format!("    call{}(value && flag);", id % 19),
    }
}

struct RepoGen<'a> {
    p: &'a RepoParams,
    rng: ChaCha8Rng,
    files: BTreeMap<String, GenFile>,
    next_line: u64,
    next_file: u64,
}

type HunkPlan = Vec<(usize, usize, usize)>;

impl RepoGen<'_> {
    fn fresh_lines(&mut self, n: usize, origin: usize) -> Vec<Line> {
        (0..n)
            .map(|_| {
                self.next_line += 1;
                Line {
                    id: self.next_line,
                    origin,
                }
            })
            .collect()
    }

    fn new_path(&mut self) -> String {
        self.next_file += 1;
        let roll: f64 = self.rng.random();
        if roll < 0.08 {
            format!("assets/tex{}.png", self.next_file)
        } else if roll < 0.15 {
            format!("docs/notes{}.txt", self.next_file)
        } else {
            let dir = DIRS.choose(&mut self.rng).expect("non-empty");
            let ext = CODE_EXT.choose(&mut self.rng).expect("non-empty");
            format!("{dir}/m{}.{ext}", self.next_file)
        }
    }

    fn text_paths(&self) -> Vec<String> {
        self.files
            .iter()
            .filter(|(_, f)| f.binary_size.is_none())
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Random sorted, non-adjacent hunks over a file of `len` lines.
    fn plan_hunks(&mut self, len: usize, max_hunks: usize, big: bool) -> HunkPlan {
        let mut out = Vec::new();
        let mut cursor = 0;
        let count = self.rng.random_range(1..=max_hunks);
        for _ in 0..count {
            if cursor > len {
                break;
            }
            let start = self.rng.random_range(cursor..=len);
            let max_old = (len - start).min(if big { 8 } else { 3 });
            let old = self.rng.random_range(0..=max_old);
            let lo_new = if old == 0 || big { 1 } else { 0 };
            let new = self.rng.random_range(lo_new..=if big { 10 } else { 4 });
            out.push((start, old, new));
            cursor = start + old + 1;
        }
        out
    }

    fn apply(&mut self, base: &[Line], plan: &HunkPlan, origin: usize) -> (Vec<Line>, Vec<Hunk>) {
        let mut out = Vec::with_capacity(base.len());
        let mut cursor = 0;
        let mut hunks = Vec::with_capacity(plan.len());
        for &(start, old, new) in plan {
            out.extend_from_slice(&base[cursor..start]);
            out.extend(self.fresh_lines(new, origin));
            cursor = start + old;
            hunks.push(Hunk::new(start as u32 + 1, old as u32, new as u32));
        }
        out.extend_from_slice(&base[cursor..]);
        (out, hunks)
    }

    fn change(&mut self, path: &str, action: FileAction, hunks: Vec<Hunk>, from_path: Option<String>) -> FileChange {
        let (mut added, mut deleted, mut edited) = (0, 0, 0);
        for h in &hunks {
            let (a, d, e) = h.line_counts();
            added += a;
            deleted += d;
            edited += e;
        }
        let file = self.files.get(path);
        let binary = file
            .and_then(|f| f.binary_size)
            .or_else(|| (file_extension(path) == Some("png")).then(|| self.rng.random_range(1_000..500_000)));
        let removed = matches!(action, FileAction::Delete | FileAction::MoveDelete);
        let text: Option<String> = match (file, binary, removed) {
            (Some(f), None, false) => Some(f.lines.iter().map(|l| line_text(l.id) + "\n").collect()),
            _ => None,
        };
        let storage_type = match (binary, file_extension(path)) {
            (Some(_), _) => StorageType::Binary,
            (None, Some("cs")) => StorageType::Utf,
            _ => StorageType::Text,
        };
        FileChange {
            path: path.to_string(),
            action,
            storage_type,
            lines_added: added,
            lines_deleted: deleted,
            lines_edited: edited,
            hunks,
            file_size: binary.or(text.as_ref().map(|t| t.len() as u64)).unwrap_or(0),
            is_code: is_code_path(path),
            from_path,
            content: if self.p.content && is_code_path(path) {
                text
            } else {
                None
            },
        }
    }

    fn add_file(&mut self, idx: usize) -> FileChange {
        let path = self.new_path();
        if file_extension(&path) == Some("png") {
            let size = self.rng.random_range(1_000..500_000);
            self.files.insert(
                path.clone(),
                GenFile {
                    lines: Vec::new(),
                    binary_size: Some(size),
                },
            );
            return self.change(&path, FileAction::Add, Vec::new(), None);
        }
        let n = self.rng.random_range(3..30);
        let lines = self.fresh_lines(n, idx);
        self.files.insert(
            path.clone(),
            GenFile {
                lines,
                binary_size: None,
            },
        );
        self.change(&path, FileAction::Add, vec![Hunk::new(1, 0, n as u32)], None)
    }

    fn edit_file(&mut self, idx: usize, path: &str, big: bool, action: FileAction, from: Option<String>) -> FileChange {
        let base = self.files[path].lines.clone();
        let plan = self.plan_hunks(base.len(), if big { 3 } else { 2 }, big);
        let (lines, hunks) = self.apply(&base, &plan, idx);
        self.files.get_mut(path).expect("exists").lines = lines;
        self.change(path, action, hunks, from)
    }

    /// A copy of `source` at a new path, optionally edited on the way.
    fn copy_file(&mut self, idx: usize, source: &str, action: FileAction) -> FileChange {
        let ext = file_extension(source).unwrap_or("c").to_string();
        self.next_file += 1;
        let dir = DIRS.choose(&mut self.rng).expect("non-empty");
        let path = format!("{dir}/m{}.{ext}", self.next_file);
        let base = self.files[source].lines.clone();
        let (lines, hunks) = if self.rng.random_bool(0.3) {
            let plan = self.plan_hunks(base.len(), 1, false);
            self.apply(&base, &plan, idx)
        } else {
            (base, Vec::new())
        };
        self.files.insert(
            path.clone(),
            GenFile {
                lines,
                binary_size: None,
            },
        );
        self.change(&path, action, hunks, Some(source.to_string()))
    }

    /// First maximal run of lines still owned by `origin`.
    fn surviving_run(&self, origin: usize) -> Option<(String, usize, usize)> {
        for (path, f) in &self.files {
            if let Some(start) = f.lines.iter().position(|l| l.origin == origin) {
                let len = f.lines[start..].iter().take_while(|l| l.origin == origin).count();
                return Some((path.clone(), start, len));
            }
        }
        None
    }
}

/// Generates a repository history with planted inducing → fix chains.
pub fn repo(params: &RepoParams) -> SyntheticRepo {
    let mut g = RepoGen {
        p: params,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        files: BTreeMap::new(),
        next_line: 0,
        next_file: 0,
    };
    let ctx = ValidationContext::new(params.start.date_naive() + Duration::days(params.commits as i64 + 365));
    let authors: Vec<String> = (1..=params.authors.max(1)).map(|a| format!("dev{a:02}")).collect();
    let mut commits = Vec::with_capacity(params.commits);
    let mut bugs = Vec::new();
    let mut pending: Vec<Chain> = Vec::new();
    let mut planted_inducing = BTreeSet::new();
    let mut fixes = BTreeMap::new();
    let mut next_bug = 0;
    let mut next_feature = 0;

    for idx in 0..params.commits {
        let timestamp = params.start + Duration::days(idx as i64);
        let mut author = authors.choose(&mut g.rng).expect("non-empty").clone();
        let message;
        let mut changes = Vec::new();
        let text_paths = g.text_paths();
        let fixable = pending.iter().position(|c| idx >= c.inducing + 2);

        if text_paths.len() < 2 {
            message = "Add new module".to_string();
            changes.push(g.add_file(idx));
        } else if let Some(k) = fixable.filter(|_| g.rng.random_bool(0.5)) {
            let chain = pending.remove(k);
            let Some((path, start, run)) = g.surviving_run(chain.inducing) else {
                continue_plain(&mut g, idx, &text_paths, &mut changes);
                message = format!("Tidy {}", text_paths[0]);
                commits.push(make_commit(&ctx, idx, author, timestamp, message, changes));
                continue;
            };
            let old = g.rng.random_range(1..=run.min(4));
            let new = g.rng.random_range(1..=3);
            let mut plan = vec![(start, old, new)];
            let len = g.files[&path].lines.len();
            if start + old + 1 < len && g.rng.random_bool(0.4) {
                plan.push((g.rng.random_range(start + old + 1..=len), 0, g.rng.random_range(1..=3)));
            }
            let base = g.files[&path].lines.clone();
            let (lines, hunks) = g.apply(&base, &plan, idx);
            g.files.get_mut(&path).expect("exists").lines = lines;
            changes.push(g.change(&path, FileAction::Edit, hunks, None));
            let by_field = g.rng.random_bool(0.25);
            message = if by_field {
                format!("Correct handling in {path}")
            } else {
                format!("Fix {}: guard {path}", chain.bug_id)
            };
            let id = commit_id(idx);
            let opened_on = commits_date(params.start, chain.inducing) + Duration::days(1);
            bugs.push(BugReport {
                id: chain.bug_id.clone(),
                severity: g.rng.random_range(1..=5),
                opened_on,
                status: BugStatus::Closed,
                area: path.split('/').next().unwrap_or_default().to_string(),
                fixed_by_commit: by_field.then(|| id.clone()),
                addressed_on: None,
            });
            planted_inducing.insert(commit_id(chain.inducing));
            fixes.insert(chain.bug_id, id);
        } else if g.rng.random_bool(params.inducing_rate) {
            // a larger change to one to three files that plants a bug
            author = authors[g.rng.random_range(0..authors.len().min(2))].clone();
            let n = g.rng.random_range(1..=3.min(text_paths.len()));
            let mut chosen: Vec<String> = text_paths.choose_multiple(&mut g.rng, n).cloned().collect();
            chosen.sort();
            for p in &chosen {
                changes.push(g.edit_file(idx, p, true, FileAction::Edit, None));
            }
            message = format!("Rework {}", chosen.join(", "));
            next_bug += 1;
            pending.push(Chain {
                bug_id: format!("BUG-{next_bug}"),
                inducing: idx,
            });
        } else {
            let roll: f64 = g.rng.random();
            let renames = params.renames;
            if roll < 0.15 {
                changes.push(g.add_file(idx));
                message = "Add new module".to_string();
            } else if roll < 0.20 && g.files.len() > 3 {
                let path = g
                    .files
                    .keys()
                    .cloned()
                    .collect::<Vec<_>>()
                    .choose(&mut g.rng)
                    .expect("non-empty")
                    .clone();
                let n = g.files[&path].lines.len() as u32;
                let hunks = if n > 0 { vec![Hunk::new(1, n, 0)] } else { Vec::new() };
                changes.push(g.change(&path, FileAction::Delete, hunks, None));
                g.files.remove(&path);
                message = format!("Remove {path}");
            } else if roll < 0.30 && renames {
                let source = text_paths.choose(&mut g.rng).expect("non-empty").clone();
                let added = g.copy_file(idx, &source, FileAction::MoveAdd);
                changes.push(g.change(&source, FileAction::MoveDelete, Vec::new(), None));
                g.files.remove(&source);
                message = format!("Move {source} to {}", added.path);
                changes.push(added);
            } else if roll < 0.35 && renames {
                let source = text_paths.choose(&mut g.rng).expect("non-empty").clone();
                let added = g.copy_file(idx, &source, FileAction::Branch);
                message = format!("Branch {source}");
                changes.push(added);
            } else if roll < 0.40 && renames {
                let pair: Vec<String> = text_paths.choose_multiple(&mut g.rng, 2).cloned().collect();
                changes.push(g.edit_file(idx, &pair[0], false, FileAction::Integrate, Some(pair[1].clone())));
                message = format!("Integrate {} into {}", pair[1], pair[0]);
            } else {
                continue_plain(&mut g, idx, &text_paths, &mut changes);
                next_feature += 1;
                message = if g.rng.random_bool(0.2) {
                    format!("Implement FEAT-{next_feature}")
                } else {
                    format!("Update {}", changes[0].path)
                };
            }
        }
        commits.push(make_commit(&ctx, idx, author, timestamp, message, changes));
    }
    // bugs whose fixes never landed stay open
    for chain in pending {
        bugs.push(BugReport {
            id: chain.bug_id,
            severity: 3,
            opened_on: commits_date(params.start, chain.inducing) + Duration::days(1),
            status: BugStatus::Open,
            area: "engine".into(),
            fixed_by_commit: None,
            addressed_on: None,
        });
    }
    bugs.sort_by_key(|b| b.id[4..].parse::<u32>().unwrap_or(0));
    SyntheticRepo {
        commits,
        bugs,
        planted_inducing,
        fixes,
    }
}

fn continue_plain(g: &mut RepoGen<'_>, idx: usize, text_paths: &[String], changes: &mut Vec<FileChange>) {
    let n = g.rng.random_range(1..=2.min(text_paths.len()));
    let mut chosen: Vec<String> = text_paths.choose_multiple(&mut g.rng, n).cloned().collect();
    chosen.sort();
    for p in chosen {
        changes.push(g.edit_file(idx, &p, false, FileAction::Edit, None));
    }
    if let Some(bin) = g
        .files
        .iter()
        .find(|(_, f)| f.binary_size.is_some())
        .map(|(p, _)| p.clone())
    {
        if g.rng.random_bool(0.1) {
            changes.push(g.change(&bin, FileAction::Edit, Vec::new(), None));
        }
    }
}

fn commit_id(idx: usize) -> String {
    format!("c{idx:05}")
}

fn commits_date(start: DateTime<Utc>, idx: usize) -> NaiveDate {
    (start + Duration::days(idx as i64)).date_naive()
}

fn make_commit(
    ctx: &ValidationContext,
    idx: usize,
    author: String,
    timestamp: DateTime<Utc>,
    message: String,
    changes: Vec<FileChange>,
) -> Commit {
    Commit {
        id: commit_id(idx),
        author,
        timestamp,
        linked_issue_keys: ctx.issue_keys(&message),
        message,
        changes,
    }
}

/// Test catalogue and repository sharing the same areas, as one dataset.
pub fn combined_dataset(
    catalog_params: &CatalogParams,
    repo_params: &RepoParams,
) -> (Dataset, SyntheticCatalog, SyntheticRepo) {
    let cat = catalog(catalog_params);
    let repo = repo(repo_params);
    let dataset = Dataset {
        tests: cat.tests.clone(),
        runs: cat.runs.clone(),
        bugs: repo.bugs.clone(),
        commits: repo.commits.clone(),
        telemetry: Vec::new(),
    };
    (dataset, cat, repo)
}

/// `n` rows at roughly `ratio` negatives per positive. The first
/// `informative` features are shifted for positives by decreasing amounts;
/// the rest are noise.
pub fn imbalanced_classification(n: usize, dim: usize, informative: usize, ratio: f64, seed: u64) -> TrainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = ((n as f64) / (ratio + 1.0)).round() as usize;
    let mut y: Vec<bool> = (0..n).map(|i| i < positives).collect();
    y.shuffle(&mut rng);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let x = y
        .iter()
        .map(|&label| {
            (0..dim)
                .map(|j| {
                    let noise: f64 = normal.sample(&mut rng);
                    if j < informative && label {
                        noise + 2.0 / (1.0 + j as f64 * 0.5)
                    } else {
                        noise
                    }
                })
                .collect()
        })
        .collect();
    let names = (0..dim).map(|j| format!("x{j}")).collect();
    TrainSet::new(names, "synthetic", x, y)
}

/// Criteria of the bundled fixture: the catalogue criteria plus a
/// transform-derived impact input and an expression over builtin metrics.
pub const FIXTURE_EXTRA_CRITERIA_TOML: &str = r#"
[[criteria]]
name = "focus"
kind = "impact"
weight = 0.3
normalization = { type = "passthrough" }
source = { manual = "focus" }

[[criteria]]
name = "defect_pressure"
kind = "probability"
weight = 0.2
normalization = { type = "affine", src_lo = 0.0, src_hi = 20.0 }
source = { expr = "defect_pressure" }
"#;

/// Extra criterion reading the per-area commit risk fed by a defect stage.
pub const FIXTURE_FEED_CRITERION_TOML: &str = r#"
[[criteria]]
name = "commit_risk"
kind = "probability"
weight = 0.3
normalization = { type = "ratio" }
source = { feed = "defects" }
"#;

const FIXTURE_TEST_FOCUS_TREE: &str = r#"{
  "name": "test_focus",
  "inputs": ["avg_distribution", "complexity", "usage"],
  "root": {
    "if": { "cmp": "gt", "lhs": { "input": "avg_distribution" }, "rhs": 0.5 },
    "then": { "input": "usage" },
    "else": {
      "binary": "div",
      "lhs": { "binary": "add", "lhs": { "input": "complexity" }, "rhs": { "input": "usage" } },
      "rhs": 2
    }
  }
}
"#;

const FIXTURE_DEFECT_PRESSURE_TREE: &str = r#"{
  "name": "defect_pressure",
  "inputs": ["open_unaddressed_defects", "dev_changes"],
  "root": {
    "binary": "add",
    "lhs": { "input": "open_unaddressed_defects" },
    "rhs": { "binary": "mul", "lhs": 0.1, "rhs": { "input": "dev_changes" } }
  }
}
"#;

const FIXTURE_TELEMETRY_CSV: &str = "area,avg_distribution,avg_stickiness,from,to
engine,0.62,0.41,2024-04-01,2024-04-30
game,0.35,0.72,2024-04-01,2024-04-30
tools,0.12,0.20,2024-04-01,2024-04-30
engine,0.58,0.44,2024-05-01,2024-05-31
game,0.40,0.70,2024-05-01,2024-05-31
tools,0.10,0.25,2024-05-01,2024-05-31
";

const FIXTURE_COMMON_TOML: &str = r#"
[[sources]]
id = "records"
path = "records.ndjson"
adapter = "records"

[[sources]]
id = "telemetry"
path = "telemetry.csv"
adapter = "telemetry_csv"

[[collections]]
name = "automated_tests"
from = "tests"
filter = [{ field = "automated", equals = true }]
links = [{ field = "area", target = "telemetry" }]

[[collections]]
name = "open_bugs"
from = "bugs"
filter = [{ field = "status", equals = "open" }]
links = [{ field = "area", target = "telemetry" }]

[[transforms]]
collection = "automated_tests"
tree = "test_focus"
output = "focus"
"#;

/// Reference date of the bundled fixture.
pub fn fixture_today() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date")
}

/// Records of the bundled fixture: 200 tests with 8 runs each and a
/// 240-commit history that ends before the reference date. Recent failing
/// runs of every fifth test report a bug so find rates are non-zero.
pub fn fixture_dataset(seed: u64) -> Dataset {
    let today = fixture_today();
    let (mut ds, _, _) = combined_dataset(
        &CatalogParams {
            tests: 200,
            today,
            seed,
            ..CatalogParams::default()
        },
        &RepoParams {
            commits: 240,
            content: true,
            start: Utc.with_ymd_and_hms(2023, 9, 1, 12, 0, 0).single().expect("valid time"),
            seed,
            ..RepoParams::default()
        },
    );
    for (k, run) in ds.runs.iter_mut().enumerate() {
        let test_no: usize = run.test_id[1..].parse().expect("synthetic ids are numeric");
        if test_no.is_multiple_of(5) && run.status == RunStatus::Failed && (today - run.tested_on).num_days() < 30 {
            run.found_bug_ids.push(format!("QA-{k}"));
        }
    }
    ds
}

/// Every file of the bundled fixture as (relative path, content).
pub fn fixture_files(seed: u64) -> Vec<(String, String)> {
    let criteria = format!("{}{}", CATALOG_CRITERIA_TOML.trim_start(), FIXTURE_EXTRA_CRITERIA_TOML);
    let with_feed = format!("{criteria}{FIXTURE_FEED_CRITERION_TOML}");
    let head = |name: &str| {
        format!(
            "name = \"{name}\"\ntoday = \"{}\"\nseed = {seed}\ntrees = [\"trees/test_focus.json\", \"trees/defect_pressure.json\"]\n{FIXTURE_COMMON_TOML}",
            fixture_today()
        )
    };
    let rbt = format!(
        r#"{}
[[stages]]
name = "selection"
kind = "rbt"
criteria_file = "criteria.toml"
tests_from = "automated_tests"
budget = {{ count = 30 }}
outputs = [{{ export = {{ path = "exports/rbt_plan.tsv" }} }}, {{ report = {{ template = "summary" }} }}]
"#,
        head("rbt")
    );
    let pipeline = format!(
        r#"{}
[[stages]]
name = "selection"
kind = "rbt"
criteria_file = "criteria_with_feed.toml"
tests_from = "automated_tests"
budget = {{ count = 30 }}
outputs = [{{ export = {{ path = "exports/nightly_plan.tsv" }} }}, {{ report = {{ template = "summary" }} }}]

[[stages]]
name = "defects"
kind = "defect_prevention"
threshold = 0.5
test_fraction = 0.2
top_features = 3
outputs = [
  {{ feed = {{ to = "selection" }} }},
  {{ export = {{ path = "exports/nightly_scores.tsv" }} }},
  {{ report = {{ template = "summary" }} }},
]

[stages.train]
n_trees = 60
max_depth = 3
learning_rate = 0.2
"#,
        head("nightly")
    );
    vec![
        ("records.ndjson".into(), fixture_dataset(seed).to_ndjson()),
        ("telemetry.csv".into(), FIXTURE_TELEMETRY_CSV.into()),
        ("criteria.toml".into(), criteria),
        ("criteria_with_feed.toml".into(), with_feed),
        ("trees/test_focus.json".into(), FIXTURE_TEST_FOCUS_TREE.into()),
        ("trees/defect_pressure.json".into(), FIXTURE_DEFECT_PRESSURE_TREE.into()),
        ("rbt.toml".into(), rbt),
        ("pipeline.toml".into(), pipeline),
    ]
}

/// Seed of the committed fixture under `fixtures/`.
pub const FIXTURE_SEED: u64 = 7;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::szz::{label_commits, RepoModel, SzzConfig};

    #[test]
    fn generators_are_deterministic() {
        let p = RepoParams {
            seed: 7,
            ..RepoParams::default()
        };
        assert_eq!(repo(&p), repo(&p));
        let c = CatalogParams {
            tests: 50,
            ..CatalogParams::default()
        };
        assert_eq!(catalog(&c), catalog(&c));
    }

    #[test]
    fn planted_chains_are_recovered() {
        for seed in 0..20 {
            let r = repo(&RepoParams {
                seed,
                commits: 60,
                ..RepoParams::default()
            });
            let model = RepoModel::build(r.commits.clone()).unwrap();
            let out = label_commits(&model, &r.bugs, SzzConfig::default()).unwrap();
            let found: BTreeSet<String> = out.inducing_ids().into_iter().map(str::to_string).collect();
            assert_eq!(found, r.planted_inducing, "seed {seed}");
        }
    }

    #[test]
    fn generated_records_validate() {
        let (dataset, _, _) = combined_dataset(
            &CatalogParams {
                tests: 20,
                ..CatalogParams::default()
            },
            &RepoParams {
                content: true,
                commits: 40,
                ..RepoParams::default()
            },
        );
        let ctx = ValidationContext::new(NaiveDate::from_ymd_opt(2030, 1, 1).unwrap());
        let back = crate::model::parse_records(&dataset.to_ndjson(), &ctx).unwrap();
        assert_eq!(back, dataset);
    }

    #[test]
    fn class_ratio() {
        let set = imbalanced_classification(700, 8, 3, 6.0, 1);
        assert_eq!(set.y.iter().filter(|v| **v).count(), 100);
    }
}
