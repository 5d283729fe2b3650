mod common;

use pdc_refine::metrics::{self, EvalRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fifty_random_instances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..50 {
        let records = common::random_records(&mut rng);
        let gap = common::max_metric_gap(&records);
        assert!(gap < 1e-6, "instance {k}: gap {gap:e}");
    }
}

#[test]
fn oracle_ranks_on_a_hand_example() {
    assert_eq!(common::ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    assert_eq!(metrics::average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
}

fn finite_pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 3..40)
}

proptest! {
    #[test]
    fn correlations_are_bounded_and_symmetric(pairs in finite_pairs()) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(p), Ok(q)) = (metrics::pearson(&xs, &ys), metrics::pearson(&ys, &xs)) {
            prop_assert!((-1.0..=1.0).contains(&p));
            prop_assert!((p - q).abs() < 1e-12);
        }
        if let Ok(s) = metrics::spearman(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(pairs in finite_pairs()) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let warped: Vec<f64> = xs.iter().map(|x| x.exp().mul_add(2.0, 3.0 * x)).collect();
        if let (Ok(a), Ok(b)) = (metrics::spearman(&xs, &ys), metrics::spearman(&warped, &ys)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn minimized_rmse_is_affine_invariant_and_below_rmse(pairs in finite_pairs(), a in 0.1..10.0f64, b in -20.0..20.0f64) {
        let (ps, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let moved: Vec<f64> = ps.iter().map(|p| a * p + b).collect();
        let m = metrics::minimized_rmse(&ps, &ys).unwrap();
        prop_assert!((m - metrics::minimized_rmse(&moved, &ys).unwrap()).abs() < 1e-7 * (1.0 + m));
        prop_assert!(m <= metrics::rmse(&ps, &ys).unwrap() + 1e-9);
    }

    #[test]
    fn auroc_complements_under_negated_scores(pairs in finite_pairs()) {
        let records: Vec<EvalRecord> = pairs.iter().map(|&(y, p)| EvalRecord { structure: "s".into(), y_true: y, y_pred: p }).collect();
        let flipped: Vec<EvalRecord> = records.iter().map(|r| EvalRecord { y_pred: -r.y_pred, ..r.clone() }).collect();
        if let (Ok(a), Ok(b)) = (metrics::auroc(&records), metrics::auroc(&flipped)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
