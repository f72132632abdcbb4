//! Risk exposure scoring.
//!
//! Each criterion is a probability, impact or time measure. Raw values are
//! normalized into `[0, 10]` (probability and impact) or `[0, 1]` (time);
//! the probability and impact factors are weighted means of their criteria,
//! the time factor is a plain mean (optionally weighted), and the exposure is
//! `R = P · T · I` in `[0, 100]`.

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::expr::{self, Bindings, ExprError, ExprRegistry};
use crate::model::{days_between, BugReport, BugStatus, Commit, RunStatus, TelemetryRecord, TestCase, TestRun};

pub const FACTOR_MAX: f64 = 10.0;
pub const TIME_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RiskError {
    #[error("non-finite raw value for criterion `{0}`")]
    NonFiniteInput(String),
    #[error("all {0:?} weights are zero")]
    AllWeightsZero(CriterionKind),
    #[error("no time criteria")]
    EmptyTimeCriteria,
    #[error("no test runs")]
    NoRuns,
    #[error("no telemetry record covers area `{0}`")]
    MissingTelemetry(String),
    #[error("test `{test}` has no manual input `{input}`")]
    MissingManualInput { test: String, input: String },
    #[error("no fed value from stage `{0}`")]
    MissingFeed(String),
    #[error("invalid criterion `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("criterion `{criterion}`: {source}")]
    Expr {
        criterion: String,
        #[source]
        source: ExprError,
    },
}

impl RiskError {
    pub fn code(&self) -> &'static str {
        match self {
            RiskError::NonFiniteInput(_) => "risk.NonFiniteInput",
            RiskError::AllWeightsZero(_) => "risk.AllWeightsZero",
            RiskError::EmptyTimeCriteria => "risk.EmptyTimeCriteria",
            RiskError::NoRuns => "risk.NoRuns",
            RiskError::MissingTelemetry(_) => "risk.MissingTelemetry",
            RiskError::MissingManualInput { .. } => "risk.MissingManualInput",
            RiskError::MissingFeed(_) => "risk.MissingFeed",
            RiskError::InvalidSpec { .. } => "risk.InvalidSpec",
            RiskError::Expr { source, .. } => source.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Probability,
    Impact,
    Time,
}

impl CriterionKind {
    pub fn upper_bound(self) -> f64 {
        match self {
            CriterionKind::Time => TIME_MAX,
            _ => FACTOR_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Normalization {
    /// Linear map of `[src_lo, src_hi]` onto the kind's range.
    Affine { src_lo: f64, src_hi: f64 },
    /// Like `Affine`, but `src_lo` maps to the top of the range.
    InverseAffine { src_lo: f64, src_hi: f64 },
    /// A fraction in `[0, 1]`, scaled ×10 for probability and impact.
    Ratio,
    /// Already on the kind's scale.
    Passthrough,
}

/// Built-in metrics computed from ingested records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinMetric {
    OpenUnaddressedDefects,
    AddressedChangeRequests,
    DefectToChangeRatio,
    ScriptFailureRate,
    AverageDistribution,
    AverageStickiness,
    QxFinalTarget,
    QxTargetVsCurrent,
    TestingHours,
    DaysSinceLastTested,
    DevChanges,
    TimeDecay,
}

impl BuiltinMetric {
    pub const ALL: [BuiltinMetric; 12] = [
        BuiltinMetric::OpenUnaddressedDefects,
        BuiltinMetric::AddressedChangeRequests,
        BuiltinMetric::DefectToChangeRatio,
        BuiltinMetric::ScriptFailureRate,
        BuiltinMetric::AverageDistribution,
        BuiltinMetric::AverageStickiness,
        BuiltinMetric::QxFinalTarget,
        BuiltinMetric::QxTargetVsCurrent,
        BuiltinMetric::TestingHours,
        BuiltinMetric::DaysSinceLastTested,
        BuiltinMetric::DevChanges,
        BuiltinMetric::TimeDecay,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BuiltinMetric::OpenUnaddressedDefects => "open_unaddressed_defects",
            BuiltinMetric::AddressedChangeRequests => "addressed_change_requests",
            BuiltinMetric::DefectToChangeRatio => "defect_to_change_ratio",
            BuiltinMetric::ScriptFailureRate => "script_failure_rate",
            BuiltinMetric::AverageDistribution => "average_distribution",
            BuiltinMetric::AverageStickiness => "average_stickiness",
            BuiltinMetric::QxFinalTarget => "qx_final_target",
            BuiltinMetric::QxTargetVsCurrent => "qx_target_vs_current",
            BuiltinMetric::TestingHours => "testing_hours",
            BuiltinMetric::DaysSinceLastTested => "days_since_last_tested",
            BuiltinMetric::DevChanges => "dev_changes",
            BuiltinMetric::TimeDecay => "time_decay",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionSource {
    Builtin(BuiltinMetric),
    /// A registered expression tree; its inputs bind to builtin metric ids.
    Expr(String),
    /// Per-area values fed by an upstream pipeline stage.
    Feed(String),
    /// A value entered by hand on the test case under this key.
    Manual(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub rate: f64,
    pub floor: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        DecayParams { rate: 0.1, floor: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub name: String,
    pub kind: CriterionKind,
    pub weight: f64,
    pub normalization: Normalization,
    pub source: CriterionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_days: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayParams>,
}

impl CriterionSpec {
    pub fn validate(&self) -> Result<(), RiskError> {
        let bad = |reason: &str| {
            Err(RiskError::InvalidSpec {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() {
            return bad("name must not be empty");
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return bad("weight must lie in [0, 1]");
        }
        match self.normalization {
            Normalization::Affine { src_lo, src_hi } | Normalization::InverseAffine { src_lo, src_hi } => {
                if !(src_lo.is_finite() && src_hi.is_finite() && src_lo < src_hi) {
                    return bad("affine bounds need src_lo < src_hi");
                }
            }
            Normalization::Ratio | Normalization::Passthrough => {}
        }
        if self.window_days == Some(0) {
            return bad("window_days must be positive");
        }
        if let Some(d) = self.decay {
            if !(d.rate > 0.0 && d.rate.is_finite()) || !(0.0..1.0).contains(&d.floor) {
                return bad("decay needs rate > 0 and floor in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAveraging {
    /// `T = Σ t_j / k`.
    #[default]
    Unweighted,
    /// `T = Σ t_j·w_j / Σ w_j`.
    Weighted,
}

/// A named set of criteria plus the time-factor averaging mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaSet {
    #[serde(default)]
    pub time_averaging: TimeAveraging,
    pub criteria: Vec<CriterionSpec>,
}

impl CriteriaSet {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let set: CriteriaSet = toml::from_str(text).map_err(|e| e.to_string())?;
        set.validate().map_err(|e| e.to_string())?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if self.criteria.is_empty() {
            return Err(RiskError::InvalidSpec {
                name: String::new(),
                reason: "criteria set is empty".into(),
            });
        }
        for (i, c) in self.criteria.iter().enumerate() {
            c.validate()?;
            if self.criteria[..i].iter().any(|o| o.name == c.name) {
                return Err(RiskError::InvalidSpec {
                    name: c.name.clone(),
                    reason: "duplicate criterion name".into(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CriterionSpec> {
        self.criteria.iter().find(|c| c.name == name)
    }
}

pub fn normalize(raw: f64, spec: &CriterionSpec) -> Result<f64, RiskError> {
    if !raw.is_finite() {
        return Err(RiskError::NonFiniteInput(spec.name.clone()));
    }
    let top = spec.kind.upper_bound();
    let scaled = match spec.normalization {
        Normalization::Affine { src_lo, src_hi } => (raw - src_lo) / (src_hi - src_lo) * top,
        Normalization::InverseAffine { src_lo, src_hi } => (src_hi - raw) / (src_hi - src_lo) * top,
        Normalization::Ratio => raw * top,
        Normalization::Passthrough => raw,
    };
    Ok(scaled.clamp(0.0, top))
}

fn weighted_mean(kind: CriterionKind, items: &[(f64, f64)]) -> Result<f64, RiskError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(v, w) in items {
        num += v * w;
        den += w;
    }
    if den <= 0.0 {
        return Err(RiskError::AllWeightsZero(kind));
    }
    Ok((num / den).clamp(0.0, kind.upper_bound()))
}

/// `P = Σ p_j·w_j / Σ w_j` over `(p_j, w_j)` pairs.
pub fn probability_factor(items: &[(f64, f64)]) -> Result<f64, RiskError> {
    weighted_mean(CriterionKind::Probability, items)
}

/// `I = Σ i_j·w_j / Σ w_j` over `(i_j, w_j)` pairs.
pub fn impact_factor(items: &[(f64, f64)]) -> Result<f64, RiskError> {
    weighted_mean(CriterionKind::Impact, items)
}

/// `T = Σ t_j / k`.
pub fn time_factor(items: &[f64]) -> Result<f64, RiskError> {
    if items.is_empty() {
        return Err(RiskError::EmptyTimeCriteria);
    }
    let sum: f64 = items.iter().sum();
    Ok((sum / items.len() as f64).clamp(0.0, TIME_MAX))
}

/// Weighted variant of [`time_factor`], used when the criteria set asks for it.
pub fn weighted_time_factor(items: &[(f64, f64)]) -> Result<f64, RiskError> {
    if items.is_empty() {
        return Err(RiskError::EmptyTimeCriteria);
    }
    weighted_mean(CriterionKind::Time, items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub name: String,
    pub kind: CriterionKind,
    pub weight: f64,
    pub raw: f64,
    pub normalized: f64,
}

/// Run-history summary kept alongside the criteria for retirement checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemHistory {
    pub runs: usize,
    /// Most recent runs, newest first, that ended `passed`.
    pub consecutive_passes: usize,
    /// Runs since the newest bug-finding run (all runs if none found a bug).
    pub bug_free_runs: usize,
    pub days_since_last_run: Option<i64>,
    pub days_since_last_bug: Option<i64>,
    pub last_tested: Option<NaiveDate>,
    pub mean_duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskItem {
    pub item_id: String,
    pub area: String,
    pub criteria: Vec<CriterionValue>,
    pub computed_at: DateTime<Utc>,
    pub history: ItemHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub name: String,
    pub kind: CriterionKind,
    pub normalized: f64,
    pub weight: f64,
    /// Fraction of the criterion's factor attributable to it.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub item_id: String,
    pub p: f64,
    pub i: f64,
    pub t: f64,
    pub r: f64,
    pub breakdown: Vec<Contribution>,
}

/// `R = P · T · I`, with the per-criterion breakdown left empty.
pub fn risk_exposure(item_id: &str, p: f64, i: f64, t: f64) -> RiskScore {
    RiskScore {
        item_id: item_id.to_string(),
        p,
        i,
        t,
        r: (p * t * i).clamp(0.0, FACTOR_MAX * FACTOR_MAX),
        breakdown: Vec::new(),
    }
}

/// Scores one item. `weights` overrides spec weights by criterion name.
pub fn score_item(
    item: &RiskItem,
    averaging: TimeAveraging,
    weights: &BTreeMap<String, f64>,
) -> Result<RiskScore, RiskError> {
    let weight_of = |c: &CriterionValue| weights.get(&c.name).copied().unwrap_or(c.weight);
    let pairs = |kind: CriterionKind| -> Vec<(f64, f64)> {
        item.criteria
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| (c.normalized, weight_of(c)))
            .collect()
    };
    let p_items = pairs(CriterionKind::Probability);
    let i_items = pairs(CriterionKind::Impact);
    let t_items = pairs(CriterionKind::Time);
    let p = probability_factor(&p_items)?;
    let i = impact_factor(&i_items)?;
    let t = match averaging {
        TimeAveraging::Unweighted => time_factor(&t_items.iter().map(|x| x.0).collect::<Vec<_>>())?,
        TimeAveraging::Weighted => weighted_time_factor(&t_items)?,
    };
    let sum_w = |v: &[(f64, f64)]| v.iter().map(|x| x.1).sum::<f64>();
    let (pw, iw, tw) = (sum_w(&p_items), sum_w(&i_items), sum_w(&t_items));
    let k = t_items.len() as f64;
    let breakdown = item
        .criteria
        .iter()
        .map(|c| {
            let w = weight_of(c);
            let share = match (c.kind, averaging) {
                (CriterionKind::Probability, _) => w / pw,
                (CriterionKind::Impact, _) => w / iw,
                (CriterionKind::Time, TimeAveraging::Unweighted) => 1.0 / k,
                (CriterionKind::Time, TimeAveraging::Weighted) => w / tw,
            };
            Contribution {
                name: c.name.clone(),
                kind: c.kind,
                normalized: c.normalized,
                weight: w,
                share,
            }
        })
        .collect();
    let mut score = risk_exposure(&item.item_id, p, i, t);
    score.breakdown = breakdown;
    Ok(score)
}

/// Fraction of runs that did not pass; blocked runs count as failures.
pub fn failure_rate(runs: &[&TestRun]) -> Result<f64, RiskError> {
    if runs.is_empty() {
        return Err(RiskError::NoRuns);
    }
    let failing = runs.iter().filter(|r| r.status != RunStatus::Passed).count();
    Ok(failing as f64 / runs.len() as f64)
}

/// `max(floor, e^(−rate·s))` for `s` bug-free executions since the last bug.
pub fn decay_time_criterion(bug_free_runs: usize, params: DecayParams) -> f64 {
    if bug_free_runs == 0 {
        return 1.0;
    }
    (-params.rate * bug_free_runs as f64).exp().max(params.floor)
}

/// Maps changed paths to the functional areas that own them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaMap {
    /// Area → path prefixes. Areas without an entry match any path that has
    /// a directory component equal to the area name (case-insensitive).
    #[serde(default)]
    pub prefixes: BTreeMap<String, Vec<String>>,
}

impl AreaMap {
    pub fn commit_touches(&self, commit: &Commit, area: &str) -> bool {
        commit.changes.iter().any(|c| self.path_in_area(&c.path, area))
    }

    pub fn path_in_area(&self, path: &str, area: &str) -> bool {
        match self.prefixes.get(area) {
            Some(prefixes) => prefixes.iter().any(|p| path.starts_with(p.as_str())),
            None => {
                let mut parts: Vec<&str> = path.split('/').collect();
                parts.pop();
                parts.iter().any(|p| p.eq_ignore_ascii_case(area))
            }
        }
    }
}

/// Everything criteria are computed from, indexed for per-item lookups.
pub struct CriteriaContext<'a> {
    pub runs: &'a [TestRun],
    pub bugs: &'a [BugReport],
    pub commits: &'a [Commit],
    pub telemetry: &'a [TelemetryRecord],
    pub areas: AreaMap,
    pub registry: &'a ExprRegistry,
    /// Stage name → area → value.
    pub feeds: BTreeMap<String, BTreeMap<String, f64>>,
    runs_by_test: BTreeMap<&'a str, Vec<&'a TestRun>>,
}

impl<'a> CriteriaContext<'a> {
    pub fn new(
        runs: &'a [TestRun],
        bugs: &'a [BugReport],
        commits: &'a [Commit],
        telemetry: &'a [TelemetryRecord],
        registry: &'a ExprRegistry,
    ) -> Self {
        let mut runs_by_test: BTreeMap<&str, Vec<&TestRun>> = BTreeMap::new();
        for r in runs {
            runs_by_test.entry(r.test_id.as_str()).or_default().push(r);
        }
        for v in runs_by_test.values_mut() {
            // stable: same-day runs keep ingestion order
            v.sort_by_key(|r| r.tested_on);
        }
        CriteriaContext {
            runs,
            bugs,
            commits,
            telemetry,
            areas: AreaMap::default(),
            registry,
            feeds: BTreeMap::new(),
            runs_by_test,
        }
    }

    pub fn with_areas(mut self, areas: AreaMap) -> Self {
        self.areas = areas;
        self
    }

    pub fn with_feeds(mut self, feeds: BTreeMap<String, BTreeMap<String, f64>>) -> Self {
        self.feeds = feeds;
        self
    }

    /// Runs of one test, oldest first.
    pub fn runs_for(&self, test_id: &str) -> &[&'a TestRun] {
        self.runs_by_test.get(test_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn history(&self, test: &TestCase, today: NaiveDate) -> ItemHistory {
        let runs = self.runs_for(&test.id);
        let consecutive_passes = runs.iter().rev().take_while(|r| r.status == RunStatus::Passed).count();
        let bug_free_runs = runs.iter().rev().take_while(|r| r.found_bug_ids.is_empty()).count();
        let last_tested = runs.last().map(|r| r.tested_on);
        let last_bug = runs
            .iter()
            .rev()
            .find(|r| !r.found_bug_ids.is_empty())
            .map(|r| r.tested_on);
        let mean_duration =
            (!runs.is_empty()).then(|| runs.iter().map(|r| r.duration).sum::<f64>() / runs.len() as f64);
        ItemHistory {
            runs: runs.len(),
            consecutive_passes,
            bug_free_runs,
            days_since_last_run: last_tested.map(|d| days_between(d, today)),
            days_since_last_bug: last_bug.map(|d| days_between(d, today)),
            last_tested,
            mean_duration,
        }
    }
}

const DEFAULT_WINDOW_DAYS: u32 = 30;

fn in_window(date: NaiveDate, today: NaiveDate, window: u32) -> bool {
    let ago = days_between(date, today);
    ago >= 0 && ago < i64::from(window)
}

/// Raw value of one builtin metric for `test`.
pub fn builtin_raw(
    metric: BuiltinMetric,
    test: &TestCase,
    ctx: &CriteriaContext<'_>,
    window_days: Option<u32>,
    decay: Option<DecayParams>,
    today: NaiveDate,
) -> Result<f64, RiskError> {
    let window = window_days.unwrap_or(DEFAULT_WINDOW_DAYS);
    let area_bugs = || ctx.bugs.iter().filter(|b| b.area == test.area);
    let area_changes = |windowed: bool| {
        ctx.commits
            .iter()
            .filter(|c| !windowed || in_window(c.timestamp.date_naive(), today, window))
            .filter(|c| ctx.areas.commit_touches(c, &test.area))
            .count()
    };
    let telemetry = || {
        ctx.telemetry
            .iter()
            .filter(|t| t.area == test.area && t.window.from <= today)
            .max_by_key(|t| t.window.to)
            .ok_or_else(|| RiskError::MissingTelemetry(test.area.clone()))
    };
    let manual = |key: &str| {
        test.manual
            .get(key)
            .copied()
            .ok_or_else(|| RiskError::MissingManualInput {
                test: test.id.clone(),
                input: key.to_string(),
            })
    };
    let runs = ctx.runs_for(&test.id);
    Ok(match metric {
        BuiltinMetric::OpenUnaddressedDefects => area_bugs()
            .filter(|b| b.status == BugStatus::Open && b.opened_on <= today)
            .count() as f64,
        BuiltinMetric::AddressedChangeRequests => area_bugs()
            .filter(|b| b.status != BugStatus::Open)
            .filter(|b| b.addressed_on.is_some_and(|d| in_window(d, today, window)))
            .count() as f64,
        BuiltinMetric::DefectToChangeRatio => {
            let windowed = window_days.is_some();
            let changes = area_changes(windowed);
            if changes == 0 {
                0.0
            } else {
                let reported = area_bugs()
                    .filter(|b| !windowed || in_window(b.opened_on, today, window))
                    .count();
                reported as f64 / changes as f64
            }
        }
        BuiltinMetric::ScriptFailureRate => {
            if runs.is_empty() {
                0.0
            } else {
                failure_rate(runs)?
            }
        }
        BuiltinMetric::AverageDistribution => telemetry()?.avg_distribution,
        BuiltinMetric::AverageStickiness => telemetry()?.avg_stickiness,
        BuiltinMetric::QxFinalTarget => manual("qx_final_target")?,
        BuiltinMetric::QxTargetVsCurrent => manual("qx_target_vs_current")?,
        BuiltinMetric::TestingHours => runs
            .iter()
            .filter(|r| in_window(r.tested_on, today, window))
            .map(|r| r.duration)
            .sum(),
        BuiltinMetric::DaysSinceLastTested => {
            let last = runs.last().map(|r| r.tested_on).unwrap_or(test.created_on);
            days_between(last, today).max(0) as f64
        }
        BuiltinMetric::DevChanges => area_changes(true) as f64,
        BuiltinMetric::TimeDecay => {
            let s = runs.iter().rev().take_while(|r| r.found_bug_ids.is_empty()).count();
            decay_time_criterion(s, decay.unwrap_or_default())
        }
    })
}

/// Computes raw and normalized values for every criterion in `set`.
pub fn compute_criteria(
    test: &TestCase,
    ctx: &CriteriaContext<'_>,
    set: &CriteriaSet,
    today: NaiveDate,
    computed_at: DateTime<Utc>,
) -> Result<RiskItem, RiskError> {
    let mut criteria = Vec::with_capacity(set.criteria.len());
    for spec in &set.criteria {
        let raw = match &spec.source {
            CriterionSource::Builtin(m) => builtin_raw(*m, test, ctx, spec.window_days, spec.decay, today)?,
            CriterionSource::Expr(name) => {
                let wrap = |source| RiskError::Expr {
                    criterion: spec.name.clone(),
                    source,
                };
                let tree = ctx.registry.get(name).ok_or_else(|| {
                    wrap(ExprError::UnknownSubtree {
                        tree: spec.name.clone(),
                        callee: name.clone(),
                    })
                })?;
                let mut bindings = Bindings::new();
                for input in expr::free_inputs(tree, ctx.registry) {
                    let value = match BuiltinMetric::from_id(&input) {
                        Some(m) => builtin_raw(m, test, ctx, spec.window_days, spec.decay, today)?,
                        None => match test.manual.get(&input) {
                            Some(v) => *v,
                            None => return Err(wrap(ExprError::MissingBinding(input))),
                        },
                    };
                    bindings.insert(input, value);
                }
                expr::eval(tree, &bindings, ctx.registry).map_err(wrap)?
            }
            CriterionSource::Feed(stage) => ctx
                .feeds
                .get(stage)
                .ok_or_else(|| RiskError::MissingFeed(stage.clone()))?
                .get(&test.area)
                .copied()
                .unwrap_or(0.0),
            CriterionSource::Manual(key) => {
                test.manual
                    .get(key)
                    .copied()
                    .ok_or_else(|| RiskError::MissingManualInput {
                        test: test.id.clone(),
                        input: key.clone(),
                    })?
            }
        };
        let normalized = normalize(raw, spec)?;
        criteria.push(CriterionValue {
            name: spec.name.clone(),
            kind: spec.kind,
            weight: spec.weight,
            raw,
            normalized,
        });
    }
    Ok(RiskItem {
        item_id: test.id.clone(),
        area: test.area.clone(),
        criteria,
        computed_at,
        history: ctx.history(test, today),
    })
}

/// [`compute_criteria`] for every test, stamped at midnight of `today`.
pub fn compute_all(
    tests: &[TestCase],
    ctx: &CriteriaContext<'_>,
    set: &CriteriaSet,
    today: NaiveDate,
) -> Result<Vec<RiskItem>, RiskError> {
    let computed_at = today.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    tests
        .iter()
        .map(|t| compute_criteria(t, ctx, set, today, computed_at))
        .collect()
}
