mod common;

use instret::eval::{average_precision, chance_baseline, family_collapse, multilabel_f1, trial_eer, LabelSet};
use instret::synth::Family;
use proptest::prelude::*;

fn class_set(classes: usize) -> impl Strategy<Value = LabelSet> {
    prop::collection::btree_set(0..classes, 0..=classes).prop_map(|s| s.into_iter().map(|c| format!("c{c}")).collect())
}

fn label_sets(classes: usize) -> impl Strategy<Value = Vec<LabelSet>> {
    prop::collection::vec(class_set(classes), 1..30)
}

fn scored_relevance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..40)
        .prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("needs a relevant query", |(_, r)| r.iter().any(|&x| x))
}

proptest! {
    #![proptest_config(common::proptest_config(500))]

    #[test]
    fn f1_in_unit_range(pairs in prop::collection::vec((class_set(6), class_set(6)), 1..30)) {
        let (p, t): (Vec<LabelSet>, Vec<LabelSet>) = pairs.into_iter().unzip();
        let f = multilabel_f1(&p, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&f.macro_avg));
        prop_assert!((0.0..=1.0).contains(&f.weighted));
    }

    #[test]
    fn perfect_predictions_score_one(t in label_sets(6).prop_filter("non-empty truth", |t| t.iter().any(|s| !s.is_empty()))) {
        let f = multilabel_f1(&t, &t).unwrap();
        prop_assert_eq!(f.macro_avg, 1.0);
        prop_assert_eq!(f.weighted, 1.0);
    }

    #[test]
    fn ap_invariant_under_monotone_maps((scores, rel) in scored_relevance()) {
        let a = average_precision(&scores, &rel).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        let b = average_precision(&mapped, &rel).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn eer_invariant_under_shift(
        pos in prop::collection::vec(-1.0f64..1.0, 1..25),
        neg in prop::collection::vec(-1.0f64..1.0, 1..25),
        shift in -3.0f64..3.0,
    ) {
        let a = trial_eer(&pos, &neg).unwrap();
        let p2: Vec<f64> = pos.iter().map(|s| s + shift).collect();
        let n2: Vec<f64> = neg.iter().map(|s| s + shift).collect();
        let b = trial_eer(&p2, &n2).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn macro_equals_weighted_for_equal_supports() {
    let set = |items: &[&str]| -> LabelSet { items.iter().map(|s| s.to_string()).collect() };
    let truths = vec![set(&["a", "b"]), set(&["c"]), set(&["a", "c"]), set(&["b"])];
    let preds = vec![set(&["a"]), set(&["c", "b"]), set(&["a"]), set(&["b", "c"])];
    let f = multilabel_f1(&preds, &truths).unwrap();
    assert!(f.per_class.values().all(|c| c.support == 2));
    assert!((f.macro_avg - f.weighted).abs() < 1e-12);
}

#[test]
fn chance_orders_family_above_instrument() {
    let families = [Family::Keyboard, Family::Guitar, Family::Brass, Family::Flute];
    let library: Vec<(String, Family)> = (0..32).map(|i| (format!("i{i:02}"), families[i % 4])).collect();
    let truths: Vec<LabelSet> = (0..200)
        .map(|q| (0..2 + q % 3).map(|k| library[(q * 7 + k * 5) % 32].0.clone()).collect())
        .collect();
    let c = chance_baseline(&truths, &library, 4, 1, 20).unwrap();
    assert!(c.instrument_f1.macro_avg < c.family_f1.macro_avg);
    assert_eq!(c, chance_baseline(&truths, &library, 4, 1, 20).unwrap());
    let collapsed = family_collapse(&truths[..1], &library.iter().cloned().collect()).unwrap();
    assert!(collapsed[0].len() <= truths[0].len());
}
