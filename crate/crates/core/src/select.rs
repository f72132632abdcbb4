//! Ranking, budgeted selection and stale-test retirement.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::risk::{score_item, Contribution, RiskError, RiskItem, RiskScore, TimeAveraging};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("nothing to rank")]
    EmptyRanking,
    #[error("budget must be positive")]
    InvalidBudget,
    #[error(transparent)]
    Risk(#[from] RiskError),
}

impl SelectError {
    pub fn code(&self) -> &'static str {
        match self {
            SelectError::EmptyRanking => "select.EmptyRanking",
            SelectError::InvalidBudget => "select.InvalidBudget",
            SelectError::Risk(e) => e.code(),
        }
    }
}

/// A scored test plus what the tie-break and hours budget need.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub score: RiskScore,
    pub last_tested: Option<NaiveDate>,
    pub expected_hours: f64,
}

impl Candidate {
    /// Builds a candidate from a scored item; `default_hours` stands in for
    /// tests that have never run.
    pub fn from_item(item: &RiskItem, score: RiskScore, default_hours: f64) -> Self {
        Candidate {
            score,
            last_tested: item.history.last_tested,
            expected_hours: item.history.mean_duration.unwrap_or(default_hours),
        }
    }
}

/// Descending risk, then least recently tested (never tested first), then
/// item id.
fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .r
        .total_cmp(&a.score.r)
        .then_with(|| match (a.last_tested, b.last_tested) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(x), Some(y)) => x.cmp(&y),
        })
        .then_with(|| a.score.item_id.cmp(&b.score.item_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub rank: usize,
    pub test_id: String,
    pub p: f64,
    pub i: f64,
    pub t: f64,
    pub r: f64,
    pub last_tested: Option<NaiveDate>,
    pub expected_hours: f64,
    pub breakdown: Vec<Contribution>,
}

pub fn rank(candidates: &[Candidate]) -> Result<Vec<RankedEntry>, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::EmptyRanking);
    }
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, c)| RankedEntry {
            rank: i + 1,
            test_id: c.score.item_id.clone(),
            p: c.score.p,
            i: c.score.i,
            t: c.score.t,
            r: c.score.r,
            last_tested: c.last_tested,
            expected_hours: c.expected_hours,
            breakdown: c.score.breakdown.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Count(usize),
    Hours(f64),
}

impl Budget {
    fn validate(self) -> Result<(), SelectError> {
        match self {
            Budget::Count(0) => Err(SelectError::InvalidBudget),
            Budget::Hours(h) if !(h > 0.0 && h.is_finite()) => Err(SelectError::InvalidBudget),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleReason {
    TimeDecay,
    ConsecutivePasses,
    Unexecuted,
}

impl StaleReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StaleReason::TimeDecay => "time_decay",
            StaleReason::ConsecutivePasses => "consecutive_passes",
            StaleReason::Unexecuted => "unexecuted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaleThresholds {
    /// Flag when the time factor is at or below this value.
    pub min_t: f64,
    /// Flag after this many passes in a row.
    pub min_consecutive_passes: usize,
    /// Flag when unexecuted for longer than this many days.
    pub max_days_unexecuted: i64,
    /// Tests that found a bug within this many days are never flagged.
    pub bug_grace_days: i64,
}

impl Default for StaleThresholds {
    fn default() -> Self {
        StaleThresholds {
            min_t: 0.05,
            min_consecutive_passes: 30,
            max_days_unexecuted: 180,
            bug_grace_days: 30,
        }
    }
}

pub type StaleSet = BTreeMap<String, Vec<StaleReason>>;

/// Finds tests to retire. `scores` supplies each item's time factor.
pub fn flag_stale(items: &[RiskItem], scores: &[RiskScore], thresholds: &StaleThresholds) -> StaleSet {
    let t_of: BTreeMap<&str, f64> = scores.iter().map(|s| (s.item_id.as_str(), s.t)).collect();
    let mut out = StaleSet::new();
    for item in items {
        let h = &item.history;
        let recently_found_bug = h.days_since_last_bug.is_some_and(|d| d <= thresholds.bug_grace_days)
            || (h.runs > 0 && h.bug_free_runs == 0);
        if recently_found_bug {
            continue;
        }
        let mut reasons = Vec::new();
        if t_of.get(item.item_id.as_str()).is_some_and(|t| *t <= thresholds.min_t) {
            reasons.push(StaleReason::TimeDecay);
        }
        if h.consecutive_passes >= thresholds.min_consecutive_passes {
            reasons.push(StaleReason::ConsecutivePasses);
        }
        if h.days_since_last_run
            .is_some_and(|d| d > thresholds.max_days_unexecuted)
        {
            reasons.push(StaleReason::Unexecuted);
        }
        if !reasons.is_empty() {
            out.insert(item.item_id.clone(), reasons);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    #[serde(flatten)]
    pub ranked: RankedEntry,
    pub selected: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stale_reasons: Vec<StaleReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub schema_version: u32,
    pub budget: Budget,
    pub entries: Vec<PlanEntry>,
}

impl SelectionPlan {
    pub fn selected(&self) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(|e| e.selected)
    }

    pub fn selected_count(&self) -> usize {
        self.selected().count()
    }

    pub fn selected_hours(&self) -> f64 {
        self.selected().map(|e| e.ranked.expected_hours).sum()
    }

    pub fn stale_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.stale_reasons.is_empty()).count()
    }

    /// Tab-separated export: rank, test_id, R, selected, stale_reason.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\ttest_id\tR\tselected\tstale_reason\n");
        for e in &self.entries {
            let reasons: Vec<&str> = e.stale_reasons.iter().map(|r| r.as_str()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.ranked.rank,
                e.ranked.test_id,
                e.ranked.r,
                e.selected,
                reasons.join(",")
            ));
        }
        out
    }
}

/// Marks the budgeted prefix of `ranked` as selected; stale tests are
/// skipped but stay in the plan with their reasons.
pub fn select_budget(ranked: &[RankedEntry], budget: Budget, stale: &StaleSet) -> Result<SelectionPlan, SelectError> {
    if ranked.is_empty() {
        return Err(SelectError::EmptyRanking);
    }
    budget.validate()?;
    let mut taken = 0usize;
    let mut hours = 0.0f64;
    let mut closed = false;
    let entries = ranked
        .iter()
        .map(|r| {
            let stale_reasons = stale.get(&r.test_id).cloned().unwrap_or_default();
            let mut selected = false;
            if stale_reasons.is_empty() && !closed {
                match budget {
                    Budget::Count(k) => {
                        if taken < k {
                            selected = true;
                            taken += 1;
                        }
                    }
                    Budget::Hours(h) => {
                        if hours + r.expected_hours <= h {
                            hours += r.expected_hours;
                            selected = true;
                        } else {
                            closed = true;
                        }
                    }
                }
            }
            PlanEntry {
                ranked: r.clone(),
                selected,
                stale_reasons,
            }
        })
        .collect();
    Ok(SelectionPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        budget,
        entries,
    })
}

/// Everything needed to turn criterion values into a plan. Kept together so
/// a plan can be recomputed later with different weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanInputs {
    pub items: Vec<RiskItem>,
    pub time_averaging: TimeAveraging,
    pub budget: Budget,
    pub stale: StaleThresholds,
    /// Expected hours for tests that have never run.
    pub default_hours: f64,
}

impl PlanInputs {
    /// Scores with `overrides` replacing weights by criterion name, then
    /// ranks, flags stale tests and applies the budget (or `budget`).
    pub fn plan(
        &self,
        overrides: &BTreeMap<String, f64>,
        budget: Option<Budget>,
    ) -> Result<SelectionPlan, SelectError> {
        let scores = self
            .items
            .iter()
            .map(|item| score_item(item, self.time_averaging, overrides))
            .collect::<Result<Vec<_>, _>>()?;
        let stale = flag_stale(&self.items, &scores, &self.stale);
        let candidates: Vec<Candidate> = self
            .items
            .iter()
            .zip(scores)
            .map(|(item, score)| Candidate::from_item(item, score, self.default_hours))
            .collect();
        select_budget(&rank(&candidates)?, budget.unwrap_or(self.budget), &stale)
    }

    /// Names of every criterion present on the items.
    pub fn criterion_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .items
            .iter()
            .flat_map(|i| i.criteria.iter().map(|c| c.name.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::{risk_exposure, ItemHistory};
    use chrono::{TimeZone, Utc};

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn cand(id: &str, r: f64, last: Option<&str>, hours: f64) -> Candidate {
        let mut score = risk_exposure(id, 10.0, 10.0, 1.0);
        score.r = r;
        Candidate {
            score,
            last_tested: last.map(d),
            expected_hours: hours,
        }
    }

    fn ids(r: &[RankedEntry]) -> Vec<&str> {
        r.iter().map(|e| e.test_id.as_str()).collect()
    }

    #[test]
    fn rank_tie_breaks() {
        let c = vec![
            cand("A", 50.0, Some("2024-01-01"), 1.0),
            cand("B", 80.0, Some("2024-02-01"), 1.0),
            cand("C", 50.0, Some("2024-02-01"), 1.0),
        ];
        let r = rank(&c).unwrap();
        assert_eq!(ids(&r), ["B", "A", "C"]);
        assert_eq!(r.iter().map(|e| e.rank).collect::<Vec<_>>(), [1, 2, 3]);

        let single = rank(&c[..1]).unwrap();
        assert_eq!(single[0].rank, 1);

        let equal = vec![
            cand("z", 5.0, Some("2024-01-01"), 1.0),
            cand("y", 5.0, None, 1.0),
            cand("x", 5.0, Some("2024-01-01"), 1.0),
        ];
        let first = rank(&equal).unwrap();
        assert_eq!(ids(&first), ["y", "x", "z"]);
        let mut rev = equal.clone();
        rev.reverse();
        assert_eq!(ids(&rank(&rev).unwrap()), ids(&first));
        assert_eq!(rank(&[]), Err(SelectError::EmptyRanking));
    }

    #[test]
    fn count_budget() {
        let c: Vec<Candidate> = (0..10).map(|i| cand(&format!("t{i}"), i as f64, None, 1.0)).collect();
        let r = rank(&c).unwrap();
        let plan = select_budget(&r, Budget::Count(3), &StaleSet::new()).unwrap();
        assert_eq!(plan.selected_count(), 3);
        assert!(plan.entries[..3].iter().all(|e| e.selected));
        let all = select_budget(&r, Budget::Count(50), &StaleSet::new()).unwrap();
        assert_eq!(all.selected_count(), 10);
        assert_eq!(
            select_budget(&r, Budget::Count(0), &StaleSet::new()),
            Err(SelectError::InvalidBudget)
        );
    }

    #[test]
    fn hours_budget_prefix() {
        let c = vec![
            cand("a", 3.0, None, 1.0),
            cand("b", 2.0, None, 0.8),
            cand("c", 1.0, None, 0.5),
        ];
        let r = rank(&c).unwrap();
        let plan = select_budget(&r, Budget::Hours(2.0), &StaleSet::new()).unwrap();
        let sel: Vec<&str> = plan.selected().map(|e| e.ranked.test_id.as_str()).collect();
        assert_eq!(sel, ["a", "b"]);
        assert!(plan.selected_hours() <= 2.0);
    }

    #[test]
    fn stale_tests_are_skipped_but_reported() {
        let c = vec![
            cand("a", 3.0, None, 1.0),
            cand("b", 2.0, None, 1.0),
            cand("c", 1.0, None, 1.0),
        ];
        let r = rank(&c).unwrap();
        let stale = StaleSet::from([("a".to_string(), vec![StaleReason::TimeDecay])]);
        let plan = select_budget(&r, Budget::Count(2), &stale).unwrap();
        let sel: Vec<&str> = plan.selected().map(|e| e.ranked.test_id.as_str()).collect();
        assert_eq!(sel, ["b", "c"]);
        assert_eq!(plan.stale_count(), 1);
        assert!(plan.to_tsv().lines().nth(1).unwrap().ends_with("\tfalse\ttime_decay"));
    }

    fn item(id: &str, history: ItemHistory) -> RiskItem {
        RiskItem {
            item_id: id.into(),
            area: "a".into(),
            criteria: vec![],
            computed_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            history,
        }
    }

    fn score_t(id: &str, t: f64) -> RiskScore {
        risk_exposure(id, 5.0, 5.0, t)
    }

    #[test]
    fn stale_flags() {
        let th = StaleThresholds {
            min_t: 0.05,
            min_consecutive_passes: 30,
            max_days_unexecuted: 90,
            bug_grace_days: 30,
        };
        let quiet = ItemHistory {
            runs: 50,
            consecutive_passes: 50,
            bug_free_runs: 50,
            days_since_last_run: Some(1),
            ..Default::default()
        };
        let failing = ItemHistory {
            runs: 5,
            consecutive_passes: 0,
            bug_free_runs: 0,
            days_since_last_run: Some(1),
            days_since_last_bug: Some(1),
            ..Default::default()
        };
        let at_floor = ItemHistory {
            runs: 5,
            consecutive_passes: 2,
            bug_free_runs: 5,
            days_since_last_run: Some(2),
            ..Default::default()
        };
        let items = vec![
            item("quiet", quiet),
            item("failing", failing.clone()),
            item("floor", at_floor),
        ];
        let scores = vec![score_t("quiet", 0.5), score_t("failing", 0.01), score_t("floor", 0.05)];
        let stale = flag_stale(&items, &scores, &th);
        assert_eq!(stale["quiet"], vec![StaleReason::ConsecutivePasses]);
        assert_eq!(stale["floor"], vec![StaleReason::TimeDecay]);
        assert!(!stale.contains_key("failing"));

        let old = ItemHistory {
            runs: 3,
            bug_free_runs: 3,
            days_since_last_run: Some(400),
            ..Default::default()
        };
        let stale = flag_stale(&[item("old", old)], &[score_t("old", 1.0)], &th);
        assert_eq!(stale["old"], vec![StaleReason::Unexecuted]);
    }
}
