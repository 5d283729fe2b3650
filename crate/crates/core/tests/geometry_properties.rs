use std::collections::BTreeSet;

use pdc_refine::geom::{clamp_psd, min_eigenvalue, squared_distance_moments, GaussianPdc, Mat3, MomentFormula, RigidMotion, Vec3};
use pdc_refine::mmm::{self, CorruptionMode, MaskRegion};
use pdc_refine::structure::build_edges;
use pdc_refine::synth;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pdc_from(seed: u64) -> GaussianPdc {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    GaussianPdc::new(Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0)), a * a.transpose()).unwrap()
}

fn max_abs_diff(a: &[[Option<Vec3>; 5]], b: &[[Option<Vec3>; 5]]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            match (p, q) {
                (Some(p), Some(q)) => worst = worst.max((p - q).amax()),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_moments_are_motion_invariant(sa in any::<u64>(), sb in any::<u64>(), sm in any::<u64>()) {
        let (a, b) = (pdc_from(sa), pdc_from(sb));
        let m = RigidMotion::random(&mut ChaCha8Rng::seed_from_u64(sm), 40.0);
        for formula in [MomentFormula::Standard, MomentFormula::PaperLiteral] {
            let before = squared_distance_moments(&a, &b, formula);
            let after = squared_distance_moments(&m.apply_pdc(&a), &m.apply_pdc(&b), formula);
            prop_assert!((before.mean - after.mean).abs() <= 1e-9 * before.mean.max(1.0));
            prop_assert!((before.variance - after.variance).abs() <= 1e-9 * before.variance.max(1.0));
        }
    }

    #[test]
    fn clamped_matrices_are_psd_and_psd_input_is_kept(entries in prop::array::uniform9(-5.0..5.0f64)) {
        let m = Mat3::from_row_slice(&entries);
        let c = clamp_psd(&m);
        prop_assert!(min_eigenvalue(&c) >= -1e-12 * c.amax().max(1.0));
        let psd = m * m.transpose();
        prop_assert!((clamp_psd(&psd) - psd).amax() <= 1e-10 * psd.amax().max(1.0));
    }

    #[test]
    fn knn_graph_is_symmetric_covering_and_motion_invariant(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = synth::random_complex(&mut rng, 7, 6).unwrap();
        let e = build_edges(&c, k).unwrap();
        let all: BTreeSet<(usize, usize)> = e.all().collect();
        prop_assert_eq!(all.len(), e.num_directed());
        for &(i, j) in &all {
            prop_assert!(i != j && all.contains(&(j, i)));
        }
        for i in 0..c.len() {
            prop_assert!(e.degree(i) >= k.min(c.len() - 1));
        }
        let moved = build_edges(&c.transformed(&RigidMotion::random(&mut rng, 60.0)), k).unwrap();
        prop_assert_eq!(moved, e);
    }

    #[test]
    fn interpolation_commutes_with_rigid_motions(seed in any::<u64>(), center in 0usize..9, l in 0usize..4, r in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = synth::random_complex(&mut rng, 9, 6).unwrap();
        let region = MaskRegion::from_indices(&c, mmm::window(&c, center, l, r)).unwrap();
        let m = RigidMotion::random(&mut rng, 30.0);
        let moved = c.transformed(&m);
        let a = mmm::corrupt(&c.coords(), &c, &region, CorruptionMode::Interpolate, 0).unwrap();
        let b = mmm::corrupt(&moved.coords(), &moved, &region, CorruptionMode::Interpolate, 0).unwrap();
        let a_moved: Vec<[Option<Vec3>; 5]> = a.iter().map(|row| row.map(|p| p.map(|x| m.apply(&x)))).collect();
        prop_assert!(max_abs_diff(&a_moved, &b) < 1e-9);
        for i in (0..c.len()).filter(|i| !region.contains(*i)) {
            prop_assert_eq!(a[i], c.coords()[i]);
        }
    }
}
