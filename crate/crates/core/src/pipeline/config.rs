//! Pipeline configuration: parsing, reference resolution and stage ordering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::expr::ExprRegistry;
use crate::learn::TrainConfig;
use crate::risk::{CriteriaSet, CriterionSource};
use crate::select::{Budget, StaleThresholds};

/// Record kinds a collection can start from.
pub const RECORD_KINDS: [&str; 5] = ["tests", "runs", "bugs", "commits", "telemetry"];

/// Report templates [`super::render_report`] knows.
pub const REPORT_TEMPLATES: [&str; 1] = ["summary"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: cannot read: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown {kind} `{name}` referenced by {from}")]
    DanglingReference { kind: String, name: String, from: String },
    #[error("stage feed cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "pipeline.Io",
            ConfigError::Parse { .. } => "pipeline.ParseError",
            ConfigError::DanglingReference { .. } => "pipeline.DanglingReference",
            ConfigError::Cycle(_) => "pipeline.CycleError",
            ConfigError::Invalid { .. } => "pipeline.InvalidConfig",
        }
    }

    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn dangling(kind: &str, name: &str, from: impl Into<String>) -> Self {
        ConfigError::DanglingReference {
            kind: kind.into(),
            name: name.into(),
            from: from.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Newline-delimited tagged domain records.
    Records,
    /// `area,avg_distribution,avg_stickiness,from,to` rows.
    TelemetryCsv,
    /// Output of `git log -p --unified=0 --date=iso-strict`.
    VcsLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub id: String,
    pub path: PathBuf,
    pub adapter: AdapterKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldFilter {
    pub field: String,
    pub equals: serde_json::Value,
}

/// One hop of a link chain: the current row's `field` is looked up in
/// `target` rows by `target_field` (defaults to `field`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkHop {
    pub field: String,
    pub target: String,
    #[serde(default)]
    pub target_field: Option<String>,
}

impl LinkHop {
    pub fn target_field(&self) -> &str {
        self.target_field.as_deref().unwrap_or(&self.field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionConfig {
    pub name: String,
    /// A record kind or an earlier collection.
    pub from: String,
    #[serde(default)]
    pub filter: Vec<FieldFilter>,
    #[serde(default)]
    pub links: Vec<LinkHop>,
}

/// Evaluates `tree` on every row of `collection`, storing the result in
/// field `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub collection: String,
    pub tree: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputConfig {
    /// Copies the stage's primary artifact to `path` (relative to the config).
    Export {
        path: PathBuf,
    },
    Report {
        template: String,
    },
    Webhook {
        url: String,
    },
    /// Hands per-area values to another stage.
    Feed {
        to: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Rbt,
    DefectPrevention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    #[serde(default)]
    pub outputs: Vec<OutputConfig>,

    // rbt
    #[serde(default)]
    pub criteria_file: Option<PathBuf>,
    #[serde(default)]
    pub criteria: Option<CriteriaSet>,
    #[serde(default)]
    pub budget: Option<Budget>,
    #[serde(default)]
    pub stale: Option<StaleThresholds>,
    #[serde(default)]
    pub default_hours: Option<f64>,
    #[serde(default)]
    pub tests_from: Option<String>,

    // defect_prevention
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub test_fraction: Option<f64>,
    #[serde(default)]
    pub suspect_partial_fixes: Option<bool>,
    #[serde(default)]
    pub complexity_threshold: Option<u32>,
    #[serde(default)]
    pub top_features: Option<usize>,
}

impl StageConfig {
    /// Stages this one hands values to.
    pub fn feeds(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().filter_map(|o| match o {
            OutputConfig::Feed { to } => Some(to.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    /// Reference date for ages and windows; the run clock's date if absent.
    #[serde(default)]
    pub today: Option<NaiveDate>,
    /// Overrides every stage's training seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub collections: Vec<CollectionConfig>,
    /// Expression tree documents, relative to the config file.
    #[serde(default)]
    pub trees: Vec<PathBuf>,
    #[serde(default)]
    pub transforms: Vec<TransformConfig>,
    /// Area → path prefixes for matching commits to areas.
    #[serde(default)]
    pub areas: BTreeMap<String, Vec<String>>,
    pub stages: Vec<StageConfig>,
}

/// Resolved settings of an rbt stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RbtSettings {
    pub criteria: CriteriaSet,
    pub budget: Budget,
    pub stale: StaleThresholds,
    pub default_hours: f64,
    pub tests_from: Option<String>,
}

/// Resolved settings of a defect-prevention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSettings {
    pub train: TrainConfig,
    pub threshold: f64,
    pub test_fraction: f64,
    pub suspect_partial_fixes: bool,
    pub complexity_threshold: u32,
    pub top_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageSettings {
    Rbt(RbtSettings),
    DefectPrevention(DefectSettings),
}

/// A validated configuration ready to run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
    pub registry: ExprRegistry,
    /// Per stage, in config order.
    pub settings: Vec<StageSettings>,
    /// Indices into `config.stages` in execution order.
    pub order: Vec<usize>,
    /// Raw config text, for the run digest.
    pub source_text: String,
}

impl Pipeline {
    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.config.stages.iter().position(|s| s.name == name)
    }

    /// Replaces the pipeline seed, as if the config had set it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = Some(seed);
        for s in &mut self.settings {
            if let StageSettings::DefectPrevention(d) = s {
                d.train.seed = seed;
            }
        }
        // keeps the run's config digest honest about the override
        self.source_text.push_str(&format!("\n# seed override: {seed}\n"));
        self
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse {
            path: path.display().to_string(),
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Reads, parses and validates a pipeline config file.
pub fn load_config(path: &Path) -> Result<Pipeline, ConfigError> {
    let text = read(path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, path, &base_dir)
}

/// Validates config `text`; `origin` only labels errors.
pub fn parse_config(text: &str, origin: &Path, base_dir: &Path) -> Result<Pipeline, ConfigError> {
    let config: PipelineConfig = parse_toml(origin, text)?;
    if !valid_name(&config.name) {
        return Err(ConfigError::invalid("name", "use letters, digits, `-` and `_` only"));
    }

    let mut ids = BTreeSet::new();
    for s in &config.sources {
        if !ids.insert(s.id.as_str()) {
            return Err(ConfigError::invalid(
                "sources",
                format!("duplicate source id `{}`", s.id),
            ));
        }
    }
    if config.sources.is_empty() {
        return Err(ConfigError::invalid("sources", "at least one source is required"));
    }

    let mut docs = Vec::new();
    for t in &config.trees {
        let p = if t.is_absolute() { t.clone() } else { base_dir.join(t) };
        docs.push(read(&p)?);
    }
    let registry = ExprRegistry::from_documents(&docs).map_err(|e| ConfigError::Parse {
        path: "trees".into(),
        line: 0,
        column: 0,
        message: e.to_string(),
    })?;

    let mut known: BTreeSet<&str> = RECORD_KINDS.into_iter().collect();
    for c in &config.collections {
        if !valid_name(&c.name) || known.contains(c.name.as_str()) {
            return Err(ConfigError::invalid(
                "collections",
                format!("collection name `{}` is invalid or taken", c.name),
            ));
        }
        if !known.contains(c.from.as_str()) {
            return Err(ConfigError::dangling(
                "collection",
                &c.from,
                format!("collection `{}`", c.name),
            ));
        }
        for hop in &c.links {
            if !known.contains(hop.target.as_str()) {
                return Err(ConfigError::dangling(
                    "collection",
                    &hop.target,
                    format!("link in collection `{}`", c.name),
                ));
            }
        }
        known.insert(&c.name);
    }
    let collections: BTreeSet<&str> = config.collections.iter().map(|c| c.name.as_str()).collect();
    for t in &config.transforms {
        if !collections.contains(t.collection.as_str()) {
            return Err(ConfigError::dangling("collection", &t.collection, "transform"));
        }
        if !registry.contains(&t.tree) {
            return Err(ConfigError::dangling("expression tree", &t.tree, "transform"));
        }
    }

    let mut stage_names = BTreeSet::new();
    for s in &config.stages {
        if !valid_name(&s.name) || !stage_names.insert(s.name.as_str()) {
            return Err(ConfigError::invalid(
                "stages",
                format!("stage name `{}` is invalid or duplicated", s.name),
            ));
        }
    }
    if config.stages.is_empty() {
        return Err(ConfigError::invalid("stages", "at least one stage is required"));
    }

    let mut settings = Vec::with_capacity(config.stages.len());
    for s in &config.stages {
        let from = format!("stage `{}`", s.name);
        for o in &s.outputs {
            match o {
                OutputConfig::Feed { to } if !stage_names.contains(to.as_str()) => {
                    return Err(ConfigError::dangling("stage", to, from));
                }
                OutputConfig::Report { template } if !REPORT_TEMPLATES.contains(&template.as_str()) => {
                    return Err(ConfigError::dangling("report template", template, from));
                }
                _ => {}
            }
        }
        settings.push(match s.kind {
            StageKind::Rbt => StageSettings::Rbt(rbt_settings(s, base_dir, &registry, &collections, &stage_names)?),
            StageKind::DefectPrevention => StageSettings::DefectPrevention(defect_settings(s, config.seed)?),
        });
    }

    let order = stage_order(&config.stages)?;
    Ok(Pipeline {
        config,
        base_dir: base_dir.to_path_buf(),
        registry,
        settings,
        order,
        source_text: text.to_string(),
    })
}

fn rbt_settings(
    s: &StageConfig,
    base_dir: &Path,
    registry: &ExprRegistry,
    collections: &BTreeSet<&str>,
    stages: &BTreeSet<&str>,
) -> Result<RbtSettings, ConfigError> {
    let field = |f: &str| format!("stages.{}.{f}", s.name);
    let criteria = match (&s.criteria, &s.criteria_file) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::invalid(
                field("criteria"),
                "give criteria or criteria_file, not both",
            ));
        }
        (Some(c), None) => c.clone(),
        (None, Some(p)) => {
            let p = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            parse_toml(&p, &read(&p)?)?
        }
        (None, None) => return Err(ConfigError::invalid(field("criteria"), "rbt stages need criteria")),
    };
    criteria
        .validate()
        .map_err(|e| ConfigError::invalid(field("criteria"), e.to_string()))?;
    for c in &criteria.criteria {
        let from = format!("criterion `{}`", c.name);
        match &c.source {
            CriterionSource::Expr(t) if !registry.contains(t) => {
                return Err(ConfigError::dangling("expression tree", t, from));
            }
            CriterionSource::Feed(st) if !stages.contains(st.as_str()) => {
                return Err(ConfigError::dangling("stage", st, from));
            }
            _ => {}
        }
    }
    if let Some(c) = &s.tests_from {
        if !collections.contains(c.as_str()) {
            return Err(ConfigError::dangling("collection", c, format!("stage `{}`", s.name)));
        }
    }
    let budget = s
        .budget
        .ok_or_else(|| ConfigError::invalid(field("budget"), "rbt stages need a budget"))?;
    match budget {
        Budget::Count(0) => return Err(ConfigError::invalid(field("budget"), "count must be positive")),
        Budget::Hours(h) if !(h > 0.0 && h.is_finite()) => {
            return Err(ConfigError::invalid(field("budget"), "hours must be positive"));
        }
        _ => {}
    }
    let default_hours = s.default_hours.unwrap_or(1.0);
    if !(default_hours > 0.0 && default_hours.is_finite()) {
        return Err(ConfigError::invalid(field("default_hours"), "must be positive"));
    }
    Ok(RbtSettings {
        criteria,
        budget,
        stale: s.stale.unwrap_or_default(),
        default_hours,
        tests_from: s.tests_from.clone(),
    })
}

fn defect_settings(s: &StageConfig, seed: Option<u64>) -> Result<DefectSettings, ConfigError> {
    let field = |f: &str| format!("stages.{}.{f}", s.name);
    let mut train = s.train.clone().unwrap_or_default();
    if let Some(seed) = seed {
        train.seed = seed;
    }
    train
        .validate()
        .map_err(|e| ConfigError::invalid(field("train"), e.to_string()))?;
    let threshold = s.threshold.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ConfigError::invalid(field("threshold"), "must lie in [0, 1]"));
    }
    let test_fraction = s.test_fraction.unwrap_or(0.2);
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(ConfigError::invalid(field("test_fraction"), "must lie in [0, 1)"));
    }
    Ok(DefectSettings {
        train,
        threshold,
        test_fraction,
        suspect_partial_fixes: s.suspect_partial_fixes.unwrap_or(false),
        complexity_threshold: s.complexity_threshold.unwrap_or(10),
        top_features: s.top_features.unwrap_or(3),
    })
}

/// Topological order of the feed graph; ties keep config order.
fn stage_order(stages: &[StageConfig]) -> Result<Vec<usize>, ConfigError> {
    let index: BTreeMap<&str, usize> = stages.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let mut indegree = vec![0usize; stages.len()];
    let mut edges = vec![Vec::new(); stages.len()];
    for (i, s) in stages.iter().enumerate() {
        for to in s.feeds() {
            let j = index[to];
            edges[i].push(j);
            indegree[j] += 1;
        }
    }
    let mut order = Vec::with_capacity(stages.len());
    let mut done = vec![false; stages.len()];
    while order.len() < stages.len() {
        let Some(next) = (0..stages.len()).find(|&i| !done[i] && indegree[i] == 0) else {
            let mut cycle = find_cycle(&edges, &done);
            cycle.push(cycle[0]);
            return Err(ConfigError::Cycle(
                cycle.into_iter().map(|i| stages[i].name.clone()).collect(),
            ));
        };
        done[next] = true;
        order.push(next);
        for &j in &edges[next] {
            indegree[j] -= 1;
        }
    }
    Ok(order)
}

/// Some cycle among the stages not yet ordered; every such stage has an
/// unordered predecessor, so walking predecessors must revisit a node.
fn find_cycle(edges: &[Vec<usize>], done: &[bool]) -> Vec<usize> {
    let n = edges.len();
    let mut pred = vec![None; n];
    for i in 0..n {
        for &j in &edges[i] {
            if !done[i] && !done[j] {
                pred[j].get_or_insert(i);
            }
        }
    }
    let start = (0..n).find(|&i| !done[i]).expect("some stage is unordered");
    let mut seen = vec![false; n];
    let mut cur = start;
    while !seen[cur] {
        seen[cur] = true;
        cur = pred[cur].expect("unordered stage has an unordered predecessor");
    }
    let mut cycle = vec![cur];
    let mut k = pred[cur].expect("on cycle");
    while k != cur {
        cycle.push(k);
        k = pred[k].expect("on cycle");
    }
    cycle.reverse();
    cycle
}
