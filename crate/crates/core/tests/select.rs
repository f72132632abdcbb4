use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use proptest::prelude::*;
use qarisk::expr::ExprRegistry;
use qarisk::model::{RunStatus, TestCase, TestRun};
use qarisk::risk::{compute_all, score_item, CriteriaContext, CriteriaSet, RiskItem};
use qarisk::select::{
    flag_stale, rank, select_budget, Budget, Candidate, PlanInputs, SelectionPlan, StaleReason, StaleThresholds,
};
use qarisk::synth::{catalog, catalog_criteria, CatalogParams};

fn catalog_inputs(tests: usize, seed: u64, budget: Budget) -> PlanInputs {
    let params = CatalogParams {
        tests,
        seed,
        ..CatalogParams::default()
    };
    let cat = catalog(&params);
    let set = catalog_criteria();
    let registry = ExprRegistry::new();
    let ctx = CriteriaContext::new(&cat.runs, &[], &[], &[], &registry);
    PlanInputs {
        items: compute_all(&cat.tests, &ctx, &set, params.today).unwrap(),
        time_averaging: set.time_averaging,
        budget,
        stale: StaleThresholds::default(),
        default_hours: 1.0,
    }
}

fn order(plan: &SelectionPlan) -> Vec<&str> {
    plan.entries.iter().map(|e| e.ranked.test_id.as_str()).collect()
}

#[test]
fn uniform_weight_scaling_keeps_the_ranking() {
    let inputs = catalog_inputs(1000, 5, Budget::Count(150));
    let base = inputs.plan(&BTreeMap::new(), None).unwrap();
    let names = inputs.criterion_names();
    let spec_weight: BTreeMap<String, f64> = inputs.items[0]
        .criteria
        .iter()
        .map(|c| (c.name.clone(), c.weight))
        .collect();
    for c in [0.5, 0.25, 1.0 / 3.0, 0.9, 1.5] {
        let overrides: BTreeMap<String, f64> = names.iter().map(|n| (n.clone(), spec_weight[n] * c)).collect();
        let scaled = inputs.plan(&overrides, None).unwrap();
        assert_eq!(order(&base), order(&scaled), "scale {c}");
        for (a, b) in base.entries.iter().zip(&scaled.entries) {
            assert!((a.ranked.r - b.ranked.r).abs() < 1e-9);
            assert_eq!(a.selected, b.selected);
        }
    }
}

#[test]
fn plan_json_round_trips() {
    let plan = catalog_inputs(200, 1, Budget::Hours(40.0))
        .plan(&BTreeMap::new(), None)
        .unwrap();
    let text = serde_json::to_string_pretty(&plan).unwrap();
    let back: SelectionPlan = serde_json::from_str(&text).unwrap();
    assert_eq!(plan, back);
    let tsv = plan.to_tsv();
    assert_eq!(tsv.lines().count(), plan.entries.len() + 1);
    assert_eq!(tsv.lines().next(), Some("rank\ttest_id\tR\tselected\tstale_reason"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn count_plans_are_dominant_prefixes(seed in 0u64..1_000, k in 1usize..300) {
        let plan = catalog_inputs(300, seed, Budget::Count(k)).plan(&BTreeMap::new(), None).unwrap();
        let ranks: Vec<usize> = plan.entries.iter().map(|e| e.ranked.rank).collect();
        prop_assert_eq!(ranks, (1..=plan.entries.len()).collect::<Vec<_>>());
        let eligible = plan.entries.iter().filter(|e| e.stale_reasons.is_empty()).count();
        prop_assert_eq!(plan.selected_count(), k.min(eligible));
        let min_sel = plan.selected().map(|e| e.ranked.r).fold(f64::INFINITY, f64::min);
        let max_unsel = plan
            .entries
            .iter()
            .filter(|e| !e.selected && e.stale_reasons.is_empty())
            .map(|e| e.ranked.r)
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_sel >= max_unsel);
        for w in plan.entries.windows(2) {
            prop_assert!(w[0].ranked.r >= w[1].ranked.r);
        }
        for e in plan.selected() {
            prop_assert!(e.stale_reasons.is_empty());
        }
    }

    #[test]
    fn hours_plans_never_exceed_the_budget(seed in 0u64..1_000, hours in 0.5f64..200.0) {
        let plan = catalog_inputs(300, seed, Budget::Hours(hours)).plan(&BTreeMap::new(), None).unwrap();
        prop_assert!(plan.selected_hours() <= hours + 1e-9);
        // greedy prefix: the first eligible test left out would not have fit
        let eligible: Vec<_> = plan.entries.iter().filter(|e| e.stale_reasons.is_empty()).collect();
        if let Some(pos) = eligible.iter().position(|e| !e.selected) {
            prop_assert!(eligible[pos..].iter().all(|e| !e.selected));
            prop_assert!(plan.selected_hours() + eligible[pos].ranked.expected_hours > hours);
        }
    }

    #[test]
    fn ranking_ignores_input_order(seed in 0u64..1_000, rotate in 0usize..100) {
        let inputs = catalog_inputs(100, seed, Budget::Count(10));
        let mut shuffled = inputs.clone();
        shuffled.items.rotate_left(rotate);
        shuffled.items.reverse();
        let a = inputs.plan(&BTreeMap::new(), None).unwrap();
        let b = shuffled.plan(&BTreeMap::new(), None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tests_that_found_a_bug_recently_are_never_stale(seed in 0u64..1_000) {
        let mut inputs = catalog_inputs(150, seed, Budget::Count(20));
        // aggressive thresholds so that most tests qualify on some rule
        inputs.stale = StaleThresholds {
            min_t: 0.9,
            min_consecutive_passes: 1,
            max_days_unexecuted: 0,
            bug_grace_days: 30,
        };
        for (k, item) in inputs.items.iter_mut().enumerate() {
            if k % 3 == 0 {
                item.history.days_since_last_bug = Some((k % 31) as i64);
            }
        }
        let scores: Vec<_> = inputs
            .items
            .iter()
            .map(|i| score_item(i, inputs.time_averaging, &BTreeMap::new()).unwrap())
            .collect();
        let stale = flag_stale(&inputs.items, &scores, &inputs.stale);
        for (k, item) in inputs.items.iter().enumerate() {
            if k % 3 == 0 {
                prop_assert!(!stale.contains_key(&item.item_id));
            }
        }
        prop_assert!(!stale.is_empty());
    }
}

const DECAY_CRITERIA: &str = r#"
[[criteria]]
name = "failures"
kind = "probability"
weight = 1.0
normalization = { type = "ratio" }
source = { builtin = "script_failure_rate" }

[[criteria]]
name = "impact"
kind = "impact"
weight = 1.0
normalization = { type = "passthrough" }
source = { manual = "impact" }

[[criteria]]
name = "decay"
kind = "time"
weight = 1.0
normalization = { type = "passthrough" }
source = { builtin = "time_decay" }
decay = { rate = 0.1, floor = 0.05 }
"#;

fn history_items() -> Vec<RiskItem> {
    let today = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap();
    let test = |id: &str| TestCase {
        id: id.into(),
        title: id.into(),
        area: "engine".into(),
        automated: true,
        created_on: today - Duration::days(400),
        manual: BTreeMap::from([("impact".to_string(), 5.0)]),
    };
    let run = |id: &str, days_ago: i64, status: RunStatus, bug: Option<&str>| TestRun {
        test_id: id.into(),
        status,
        tested_on: today - Duration::days(days_ago),
        duration: 0.5,
        found_bug_ids: bug.map(|b| vec![b.to_string()]).unwrap_or_default(),
    };
    let mut runs = Vec::new();
    // 50 passes in a row after an old bug
    runs.push(run("steady", 120, RunStatus::Failed, Some("QA-1")));
    for k in 0..50 {
        runs.push(run("steady", 100 - 2 * k, RunStatus::Passed, None));
    }
    // same history, but the newest run found a bug
    runs.push(run("fresh", 120, RunStatus::Failed, Some("QA-2")));
    for k in 0..50 {
        runs.push(run("fresh", 100 - 2 * k, RunStatus::Passed, None));
    }
    runs.push(run("fresh", 0, RunStatus::Failed, Some("QA-3")));
    let tests = vec![test("steady"), test("fresh")];
    let set = CriteriaSet::from_toml(DECAY_CRITERIA).unwrap();
    let registry = ExprRegistry::new();
    let ctx = CriteriaContext::new(&runs, &[], &[], &[], &registry);
    compute_all(&tests, &ctx, &set, today).unwrap()
}

#[test]
fn fifty_passes_decay_to_the_floor_and_retire() {
    let items = history_items();
    let scores: Vec<_> = items
        .iter()
        .map(|i| score_item(i, Default::default(), &BTreeMap::new()).unwrap())
        .collect();
    let steady = &scores[0];
    assert_eq!(steady.t, 0.05);
    assert_eq!(items[0].history.consecutive_passes, 50);
    let stale = flag_stale(&items, &scores, &StaleThresholds::default());
    assert_eq!(
        stale.get("steady"),
        Some(&vec![StaleReason::TimeDecay, StaleReason::ConsecutivePasses])
    );
    assert!(!stale.contains_key("fresh"));
    assert_eq!(scores[1].t, 1.0);

    let candidates: Vec<Candidate> = items
        .iter()
        .zip(scores)
        .map(|(i, s)| Candidate::from_item(i, s, 1.0))
        .collect();
    let plan = select_budget(&rank(&candidates).unwrap(), Budget::Count(2), &stale).unwrap();
    let steady_entry = plan.entries.iter().find(|e| e.ranked.test_id == "steady").unwrap();
    assert!(!steady_entry.selected);
    assert_eq!(plan.selected_count(), 1);
}
