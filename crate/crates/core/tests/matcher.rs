use std::collections::BTreeSet;

use pess_core::corpus::normalize;
use pess_core::matcher::{match_persona, SimilarityMatrix};
use proptest::prelude::*;

const POOL: [&str; 5] = ["i like tea.", "I like tea.", "i own a cat.", "my car is red.", "i swim daily."];

fn instance() -> impl Strategy<Value = SimilarityMatrix> {
    (1usize..=8, 0usize..=8).prop_flat_map(|(m, k)| {
        (
            proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, k), m),
            proptest::collection::vec(0..POOL.len(), m),
            proptest::collection::vec(0..POOL.len(), k),
        )
            .prop_map(|(scores, gt, gen)| {
                let pick = |ix: Vec<usize>| ix.into_iter().map(|i| POOL[i].to_string()).collect();
                SimilarityMatrix::from_scores(scores, pick(gt), pick(gen)).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn verdicts_partition_ground_truth(sim in instance(), tau in 0.01f64..=1.0) {
        let r = match_persona(&sim, tau).unwrap();
        let missing: Vec<&String> = r.verdicts.iter().filter(|v| !v.consistent).map(|v| &sim.ground_truth[v.gt_index]).collect();
        prop_assert_eq!(missing, r.missing_set.iter().collect::<Vec<_>>());
        prop_assert_eq!(r.verdicts.len(), sim.ground_truth.len());
        for (i, v) in r.verdicts.iter().enumerate() {
            prop_assert_eq!(v.gt_index, i);
        }
    }

    #[test]
    fn raising_tau_is_monotone(sim in instance(), t1 in 0.01f64..=1.0, t2 in 0.01f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = match_persona(&sim, lo).unwrap();
        let b = match_persona(&sim, hi).unwrap();
        let con = |r: &pess_core::matcher::MatchResult| r.verdicts.iter().filter(|v| v.consistent).map(|v| v.gt_index).collect::<BTreeSet<_>>();
        let miss = |r: &pess_core::matcher::MatchResult| r.verdicts.iter().filter(|v| !v.consistent).map(|v| v.gt_index).collect::<BTreeSet<_>>();
        prop_assert!(con(&b).is_subset(&con(&a)));
        prop_assert!(miss(&a).is_subset(&miss(&b)));
    }

    #[test]
    fn repeated_calls_are_identical(sim in instance(), tau in 0.01f64..=1.0) {
        let a = serde_json::to_string(&match_persona(&sim, tau).unwrap()).unwrap();
        let b = serde_json::to_string(&match_persona(&sim, tau).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn new_target_has_no_duplicates(sim in instance(), tau in 0.01f64..=1.0) {
        let r = match_persona(&sim, tau).unwrap();
        let uniq: BTreeSet<String> = r.new_target.iter().map(|s| normalize(s)).collect();
        prop_assert_eq!(uniq.len(), r.new_target.len());
        let con: BTreeSet<String> = r.consistent_set.iter().map(|s| normalize(s)).collect();
        prop_assert_eq!(con.len(), r.consistent_set.len());
        prop_assert_eq!(&r.new_target[..r.consistent_set.len()], &r.consistent_set[..]);
    }
}
