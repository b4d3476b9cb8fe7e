use proptest::prelude::*;

use cfdist::bounds::{
    fh_pointwise, logsumexp_min, softmin_weights, smooth_lower_score, smooth_upper_score, PerPointNuisance,
};
use cfdist::data::{make_folds, FoldMode, FoldRole, LogvarMode, RunConfig, VaeConfig};
use cfdist::hsic::{self, KernelSpec};
use cfdist::ivvae::gaussian_kl;
use cfdist::nuisance::{fit_conditional_cdf, fit_propensity, NuisanceConfig};
use cfdist::tml::binary_summands;
use cfdist::{Dataset, Observation};

fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), n)
}

fn binary_table() -> impl Strategy<Value = Vec<(f64, bool, f64)>> {
    proptest::collection::vec((-3.0f64..3.0, any::<bool>(), -2.0f64..2.0), 8..80).prop_filter("both arms", |rows| {
        rows.iter().any(|r| r.1) && rows.iter().any(|r| !r.1)
    })
}

fn dataset(rows: &[(f64, bool, f64)]) -> Dataset {
    Dataset::from_rows(rows.iter().map(|&(y, a, x)| Observation::new(y, f64::from(u8::from(a))).with_x(vec![x])).collect())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_rows(n in 3usize..400, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let plan = make_folds(n, k, FoldMode::Double, seed).unwrap();
        let mut seen = vec![0usize; n];
        for f in 0..k {
            for i in plan.fold_rows(f) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(&plan, &make_folds(n, k, FoldMode::Double, seed).unwrap());
    }

    #[test]
    fn triple_roles_are_disjoint_and_nonempty(n in 6usize..400, third in 1usize..4, seed in any::<u64>()) {
        let k = 3 * third;
        prop_assume!(n >= k);
        let plan = make_folds(n, k, FoldMode::Triple, seed).unwrap();
        prop_assert_eq!(plan.n_rotations(), 3);
        for r in 0..3 {
            let mut seen = vec![0usize; n];
            for role in [FoldRole::Representation, FoldRole::Nuisance, FoldRole::Evaluation] {
                let rows = plan.rows_with_role(r, role);
                prop_assert!(!rows.is_empty());
                for i in rows {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
        // every fold evaluates exactly once
        for f in 0..k {
            let evals = (0..3).filter(|&r| plan.role_of_fold[r][f] == FoldRole::Evaluation).count();
            prop_assert_eq!(evals, 1);
        }
    }

    #[test]
    fn dataset_survives_csv_round_trip(rows in binary_table()) {
        let d = dataset(&rows);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn config_round_trips_through_json(
        seed in any::<u64>(),
        third in 1usize..5,
        bounds_folds in 2usize..10,
        t in 0.5f64..1e4,
        clip in 1e-4f64..0.2,
        beta in 0.0f64..4.0,
        lambda in 0.0f64..500.0,
        hidden in proptest::collection::vec(1usize..64, 1..4),
        fixed in proptest::option::of(-5.0f64..5.0),
    ) {
        let cfg = RunConfig {
            seed,
            k_folds: 3 * third,
            bounds_folds,
            smoothing_t: t,
            clip_eps: clip,
            vae: VaeConfig {
                beta,
                lambda,
                hidden,
                treatment_logvar: fixed.map_or(LogvarMode::Learned, LogvarMode::Fixed),
                ..VaeConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn fitted_cdf_is_monotone_and_in_range(rows in binary_table(), mut grid in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let d = dataset(&rows);
        let cfg = NuisanceConfig::with_clip(0.01);
        let model = fit_conditional_cdf(&d, &grid, &cfg).unwrap();
        let ps = fit_propensity(&d, &cfg).unwrap();
        for x in [-2.5, -0.3, 0.0, 1.7, 2.9] {
            for arm in [0u8, 1] {
                let c = model.predict_curve(arm, &[x]);
                prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            }
            let p = ps.predict_treated(&[x]);
            prop_assert!((0.01..=0.99).contains(&p));
        }
        prop_assert_eq!(fit_conditional_cdf(&d, &grid, &cfg).unwrap().predict_curve(1, &[0.4]), model.predict_curve(1, &[0.4]));
    }

    #[test]
    fn pointwise_bounds_are_ordered(u in 0.0f64..=1.0, v in 0.0f64..=1.0, t in 0.1f64..1e5) {
        let (lo, hi) = fh_pointwise(u, v).unwrap();
        prop_assert!(lo <= hi);
        prop_assert!(lo >= 0.0 && hi <= 1.0);
        let g = logsumexp_min(u, v, t);
        prop_assert!(g <= hi + 1e-12 && g >= hi - 2f64.ln() / t - 1e-12);
        let (w0, w1) = softmin_weights(v, u, t);
        prop_assert!((w0 + w1 - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&w0) && (0.0..=1.0).contains(&w1));
    }

    #[test]
    fn smooth_scores_are_finite(theta0 in 0.0f64..=1.0, theta1 in 0.0f64..=1.0, pi1 in 0.01f64..0.99,
                                arm in 0u8..2, below0: bool, below1: bool, t in 0.1f64..1e6) {
        let r = PerPointNuisance { theta0, theta1, pi1, arm, below0, below1 };
        prop_assert!(smooth_upper_score(&r, t).is_finite());
        prop_assert!(smooth_lower_score(&r, t).is_finite());
    }

    #[test]
    fn hsic_is_symmetric_and_non_negative(x in points(12, 2), y in points(12, 1), bx in 0.2f64..4.0, by in 0.2f64..4.0) {
        let (kx, ky) = (KernelSpec::new(bx).unwrap(), KernelSpec::new(by).unwrap());
        let a = hsic::hsic_stat(&x, &y, kx, ky).unwrap();
        let b = hsic::hsic_stat(&y, &x, ky, kx).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= -1e-12);
    }

    #[test]
    fn kl_is_non_negative(mu in proptest::collection::vec(-5.0f64..5.0, 1..6), lv in -10.0f64..10.0) {
        let logvar = vec![lv; mu.len()];
        prop_assert!(gaussian_kl(&mu, &logvar) >= 0.0);
    }

    #[test]
    fn ipw_weights_respect_clip(ys in proptest::collection::vec(-5.0f64..5.0, 1..40), clip in 1e-3f64..0.2, raw in 0.0f64..1.0) {
        let n = ys.len();
        let arms: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let pi = vec![raw.clamp(clip, 1.0 - clip); n];
        let m = vec![0.0; n];
        let s = binary_summands(&arms, &ys, &m, &pi, 1);
        for (w, y) in s.ipw.iter().zip(&ys) {
            prop_assert!(w.abs() <= y.abs() / clip + 1e-12);
        }
    }
}
