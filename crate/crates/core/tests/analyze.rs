mod common;

use common::{matrix, uniform};
use dsvq::analyze::{compare_curves, disturbance_magnitude, expressiveness_curve};
use dsvq::quantizer::{compute_params, fake_quant, ClipParams, Granularity, QuantConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn curve_is_monotone_and_ends_at_one(h in matrix(16, 16, 3.0)) {
        prop_assume!(h.max_abs() > 0.0);
        let c = expressiveness_curve(&h).unwrap();
        prop_assert_eq!(c.len(), h.rows().min(h.cols()));
        prop_assert!(c.points.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.points.iter().all(|p| *p > 0.0 && *p <= 1.0));
        prop_assert_eq!(*c.points.last().unwrap(), 1.0);
    }

    #[test]
    fn curve_ignores_scale(h in matrix(16, 16, 3.0), k in prop_oneof![-50.0..-0.01f64, 0.01..50.0f64]) {
        prop_assume!(h.max_abs() > 0.0);
        let a = expressiveness_curve(&h).unwrap();
        let b = expressiveness_curve(&h.scaled(k)).unwrap();
        prop_assert!(compare_curves(&a, &b).max_deviation <= 1e-9);
    }

    #[test]
    fn disturbance_matches_mean_abs(seed in any::<u64>(), r in 1usize..10, c in 1usize..10) {
        let a = uniform(r, c, -2.0, 2.0, seed);
        let b = uniform(r, c, -2.0, 2.0, seed ^ 1);
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..c {
                total += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
        let d = disturbance_magnitude(&a, &b).unwrap();
        prop_assert!((d - total / (r * c) as f64).abs() <= 1e-12);
    }

    #[test]
    fn unclipped_disturbance_is_within_half_step(w in matrix(12, 12, 4.0), bits in 2u32..=8, size in 1usize..5) {
        let cfg = QuantConfig::new(bits, Granularity::Group { size }).unwrap();
        let clip = ClipParams::identity(cfg.layout(w.rows(), w.cols()).unwrap().n_groups());
        let (fq, _) = fake_quant(&w, &cfg, &clip).unwrap();
        let p = compute_params(&w, &cfg, &clip).unwrap();
        prop_assert!(disturbance_magnitude(&w, &fq).unwrap() <= p.max_scale() / 2.0 + 1e-9);
    }
}
