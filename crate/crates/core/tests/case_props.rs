mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sijgrade::case::{rule_case_grade, runlength_features, threshold_two_class, CaseGrade, TwoClassGrade};

fn sgv() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..=4, 1..45)
}

/// All maximal runs as (value, length).
fn enumerate_runs(v: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &g in v {
        match out.last_mut() {
            Some((h, n)) if *h == g => *n += 1,
            _ => out.push((g, 1)),
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rule_matches_literal_reading(v in sgv()) {
        prop_assert_eq!(rule_case_grade(&v).unwrap().index(), common::literal_rule(&v));
    }

    #[test]
    fn count_criteria_ignore_order(v in proptest::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4]), 1..40), seed in any::<u64>()) {
        let mut w = v.clone();
        w.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(rule_case_grade(&v).unwrap(), rule_case_grade(&w).unwrap());
    }

    #[test]
    fn runlength_features_keep_the_two_longest(v in proptest::collection::vec(0usize..5, 1..45)) {
        let f = runlength_features(&v, 5).unwrap();
        let runs = enumerate_runs(&v);
        prop_assert_eq!(runs.iter().map(|r| r.1).sum::<usize>(), v.len());
        for class in 0..5 {
            let mut lens: Vec<usize> = runs.iter().filter(|r| r.0 == class).map(|r| r.1).collect();
            lens.sort_unstable_by(|a, b| b.cmp(a));
            lens.resize(2.max(lens.len()), 0);
            prop_assert_eq!(f[2 * class], lens[0] as f64);
            prop_assert_eq!(f[2 * class + 1], lens[1] as f64);
        }
    }

    #[test]
    fn tau_half_is_argmax(p in 0.0f64..1.0) {
        prop_assume!((p - 0.5).abs() > 1e-12);
        let want = if p > 0.5 { TwoClassGrade::Unhealthy } else { TwoClassGrade::Healthy };
        prop_assert_eq!(threshold_two_class(&[1.0 - p, p], 0.5).unwrap(), want);
    }
}

#[test]
fn healthy_slice_breaks_a_grade3_run() {
    assert_eq!(rule_case_grade(&[0, 3, 3, 3, 0, 0]).unwrap(), CaseGrade::Sick);
    assert_eq!(rule_case_grade(&[0, 3, 3, 0, 3, 0, 0]).unwrap(), CaseGrade::Healthy);
}

#[test]
fn directed_edge_cases() {
    assert_eq!(rule_case_grade(&[0; 12]).unwrap(), CaseGrade::Healthy);
    assert_eq!(rule_case_grade(&[0, 0, 4, 0, 0]).unwrap(), CaseGrade::Healthy);
    assert_eq!(rule_case_grade(&[0, 4, 0, 4, 0]).unwrap(), CaseGrade::Sick);
    assert_eq!(rule_case_grade(&[2, 0, 2, 0, 2, 0, 0, 0, 0, 0]).unwrap(), CaseGrade::Suspicious);
    assert!(rule_case_grade(&[]).is_err());
    assert!(rule_case_grade(&[5]).is_err());
}
