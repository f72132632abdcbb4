mod support;

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use proptest::prelude::*;
use qarisk::expr::ExprRegistry;
use qarisk::model::{RunStatus, TestRun};
use qarisk::risk::{
    compute_all, decay_time_criterion, failure_rate, normalize, score_item, CriteriaContext, CriterionKind,
    CriterionSource, CriterionSpec, CriterionValue, DecayParams, ItemHistory, Normalization, RiskItem, TimeAveraging,
};
use qarisk::synth::{catalog, catalog_criteria, CatalogParams};
use support::oracles;

fn value(name: String, kind: CriterionKind, weight: f64, normalized: f64) -> CriterionValue {
    CriterionValue {
        name,
        kind,
        weight,
        raw: normalized,
        normalized,
    }
}

fn item(p: &[(f64, f64)], i: &[(f64, f64)], t: &[(f64, f64)]) -> RiskItem {
    let mut criteria = Vec::new();
    for (kind, list) in [
        (CriterionKind::Probability, p),
        (CriterionKind::Impact, i),
        (CriterionKind::Time, t),
    ] {
        for (k, (v, w)) in list.iter().enumerate() {
            criteria.push(value(format!("{kind:?}{k}"), kind, *w, *v));
        }
    }
    RiskItem {
        item_id: "x".into(),
        area: "engine".into(),
        criteria,
        computed_at: Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap(),
        history: ItemHistory::default(),
    }
}

fn factor_items(hi: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..=hi, 0.001f64..=1.0), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn factors_match_brute_force_and_stay_in_range(
        p in factor_items(10.0),
        i in factor_items(10.0),
        t in factor_items(1.0),
    ) {
        let s = score_item(&item(&p, &i, &t), TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        let tv: Vec<f64> = t.iter().map(|x| x.0).collect();
        let (op, oi, ot, or) = oracles::exposure(&p, &i, &tv);
        prop_assert!((s.p - op).abs() <= 1e-9);
        prop_assert!((s.i - oi).abs() <= 1e-9);
        prop_assert!((s.t - ot).abs() <= 1e-9);
        prop_assert!((s.r - or).abs() <= 1e-9);
        prop_assert!((0.0..=10.0).contains(&s.p) && (0.0..=10.0).contains(&s.i));
        prop_assert!((0.0..=1.0).contains(&s.t) && (0.0..=100.0).contains(&s.r));
        // shares within each factor add up to one
        for kind in [CriterionKind::Probability, CriterionKind::Impact, CriterionKind::Time] {
            let total: f64 = s.breakdown.iter().filter(|c| c.kind == kind).map(|c| c.share).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_time_mode_matches_brute_force(t in factor_items(1.0)) {
        let p = [(5.0, 1.0)];
        let s = score_item(&item(&p, &p, &t), TimeAveraging::Weighted, &BTreeMap::new()).unwrap();
        prop_assert!((s.t - oracles::weighted_mean(&t)).abs() <= 1e-9);
    }

    #[test]
    fn raising_one_input_never_lowers_r(
        p in factor_items(10.0),
        i in factor_items(10.0),
        t in factor_items(1.0),
        which in 0usize..3,
        bump in 0.0f64..5.0,
    ) {
        let base = score_item(&item(&p, &i, &t), TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        let (mut p2, mut i2, mut t2) = (p.clone(), i.clone(), t.clone());
        match which {
            0 => p2[0].0 = (p2[0].0 + bump).min(10.0),
            1 => i2[0].0 = (i2[0].0 + bump).min(10.0),
            _ => t2[0].0 = (t2[0].0 + bump / 5.0).min(1.0),
        }
        let raised = score_item(&item(&p2, &i2, &t2), TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        prop_assert!(raised.r >= base.r - 1e-12);
    }

    #[test]
    fn scaling_probability_weights_keeps_p(p in factor_items(10.0), c in 0.01f64..100.0) {
        let i = [(4.0, 1.0)];
        let t = [(0.5, 1.0)];
        let a = score_item(&item(&p, &i, &t), TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        let scaled: Vec<(f64, f64)> = p.iter().map(|(v, w)| (*v, w * c)).collect();
        let b = score_item(&item(&scaled, &i, &t), TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        prop_assert!((a.p - b.p).abs() <= 1e-12 * a.p.max(1.0));
    }

    #[test]
    fn criterion_order_does_not_matter(p in factor_items(10.0), i in factor_items(10.0), t in factor_items(1.0)) {
        let a = score_item(&item(&p, &i, &t), TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        let mut it = item(&p, &i, &t);
        it.criteria.reverse();
        let b = score_item(&it, TimeAveraging::Unweighted, &BTreeMap::new()).unwrap();
        prop_assert!((a.r - b.r).abs() <= 1e-9);
    }

    #[test]
    fn normalization_lands_in_kind_range(
        raw in -1e6f64..1e6,
        lo in -100.0f64..100.0,
        width in 0.001f64..200.0,
        kind in prop_oneof![Just(CriterionKind::Probability), Just(CriterionKind::Impact), Just(CriterionKind::Time)],
        mode in 0usize..4,
    ) {
        let normalization = match mode {
            0 => Normalization::Affine { src_lo: lo, src_hi: lo + width },
            1 => Normalization::InverseAffine { src_lo: lo, src_hi: lo + width },
            2 => Normalization::Ratio,
            _ => Normalization::Passthrough,
        };
        let spec = CriterionSpec {
            name: "c".into(),
            kind,
            weight: 1.0,
            normalization,
            source: CriterionSource::Manual("c".into()),
            window_days: None,
            decay: None,
        };
        let v = normalize(raw, &spec).unwrap();
        prop_assert!(v >= 0.0 && v <= kind.upper_bound());
    }

    #[test]
    fn decay_is_monotone_and_floored(s in 0usize..500, rate in 0.001f64..3.0, floor in 0.0f64..0.99) {
        let params = DecayParams { rate, floor };
        let now = decay_time_criterion(s, params);
        let later = decay_time_criterion(s + 1, params);
        prop_assert!(later <= now);
        prop_assert!(now >= floor && now <= 1.0);
        prop_assert_eq!(decay_time_criterion(0, params), 1.0);
    }
}

#[test]
fn worked_failure_rate_example() {
    let day = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
    let runs: Vec<TestRun> = [(RunStatus::Passed, 3), (RunStatus::Failed, 4), (RunStatus::Blocked, 3)]
        .into_iter()
        .flat_map(|(status, n)| std::iter::repeat_n(status, n))
        .enumerate()
        .map(|(k, status)| TestRun {
            test_id: "T1".into(),
            status,
            tested_on: day + Duration::days(k as i64),
            duration: 1.0,
            found_bug_ids: Vec::new(),
        })
        .collect();
    let refs: Vec<&TestRun> = runs.iter().collect();
    assert_eq!(failure_rate(&refs).unwrap(), 0.70);
}

#[test]
fn parallel_scoring_equals_sequential() {
    let params = CatalogParams {
        tests: 600,
        seed: 11,
        ..CatalogParams::default()
    };
    let cat = catalog(&params);
    let set = catalog_criteria();
    let registry = ExprRegistry::new();
    let ctx = CriteriaContext::new(&cat.runs, &[], &[], &[], &registry);
    let sequential = compute_all(&cat.tests, &ctx, &set, params.today).unwrap();
    let parallel: Vec<RiskItem> = std::thread::scope(|scope| {
        let handles: Vec<_> = cat
            .tests
            .chunks(97)
            .map(|chunk| {
                let (ctx, set) = (&ctx, &set);
                scope.spawn(move || compute_all(chunk, ctx, set, params.today).unwrap())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(sequential, parallel);
}
