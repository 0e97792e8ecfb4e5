mod support;

use cace_core::data::{Dataset, Observation};
use cace_core::diagnostics::{density_check_from, mean_weight_equality};
use cace_core::estimators::{decompose_from_points, Analysis, EstimatorConfig};
use cace_core::gee::{Stack, StackedProblem};
use cace_core::logit::Arm;
use cace_core::simulation::{generate_trial, Scenario};
use cace_core::weights::{
    weights_from_propensities, EstimandKind, ShareVariant, StrataShares, WeightVector,
};
use cace_core::wls::fit_wls;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use support::*;

const KINDS: [EstimandKind; 6] = [
    EstimandKind::Itt,
    EstimandKind::CaceT,
    EstimandKind::CaceTIv,
    EstimandKind::CaceTcRatio,
    EstimandKind::CaceTcIpw,
    EstimandKind::Tau11,
];

fn propensities(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let e1 = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
    let e0 = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
    (e1, e0)
}

fn rebuild(d: &Dataset, f: impl Fn(usize, &Observation) -> Observation) -> Dataset {
    let rows = d.rows().iter().enumerate().map(|(i, o)| f(i, o)).collect();
    Dataset::from_observations(
        rows,
        d.covariate_names().to_vec(),
        d.covariate_names_wls.clone(),
        d.covariate_names_logit_t.clone(),
        d.covariate_names_logit_c.clone(),
    )
    .unwrap()
}

/// Point and primary SE for every kind, or `None` when a receipt model
/// cannot be fitted on `d`.
fn estimates(d: &Dataset) -> Option<Vec<(f64, f64)>> {
    let a = Analysis::new(d, EstimatorConfig::default());
    KINDS
        .iter()
        .map(|&k| a.estimate(k).ok().map(|r| (r.point, r.primary_se())))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_lie_in_unit_interval(seed in 0u64..10_000, m in 4usize..12) {
        let d = random_fittable_dataset(seed, m, (2, 6), 1, 0, 0, 0);
        let (e1, e0) = propensities(seed, d.n_rows());
        for kind in KINDS {
            let w = weights_from_propensities(kind, ShareVariant::FromT, &d, Some(&e1), Some(&e0)).unwrap();
            prop_assert!(w.values.iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
        }
    }

    #[test]
    fn wls_effect_is_invariant_to_weight_scale(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let d = random_fittable_dataset(seed, 8, (2, 5), 2, 2, 0, 0);
        let (e1, e0) = propensities(seed, d.n_rows());
        let w = weights_from_propensities(EstimandKind::CaceTcIpw, ShareVariant::FromT, &d, Some(&e1), Some(&e0))
            .unwrap()
            .values;
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let a = fit_wls(&d, &w, &d.covariate_names_wls).unwrap();
        let b = fit_wls(&d, &scaled, &d.covariate_names_wls).unwrap();
        let (ea, eb) = (a.mu_t - a.mu_c, b.mu_t - b.mu_c);
        prop_assert!((ea - eb).abs() <= 1e-9 * (1.0 + ea.abs()), "{ea} vs {eb}");
        prop_assert!((a.decomposed_effect() - ea).abs() <= 1e-9 * (1.0 + ea.abs()));
    }

    #[test]
    fn estimates_are_affine_equivariant(seed in 0u64..1_000, shift in -5.0f64..5.0, slope in 0.2f64..4.0) {
        let d = random_fittable_dataset(seed, 12, (3, 6), 1, 1, 1, 1);
        let base = estimates(&d);
        prop_assume!(base.is_some());
        let base = base.unwrap();
        let moved = d.map_outcome(|y| shift + slope * y);
        for (a, b) in base.iter().zip(estimates(&moved).unwrap()) {
            prop_assert!((slope * a.0 - b.0).abs() <= 1e-8 * (1.0 + b.0.abs()), "{a:?} vs {b:?}");
            prop_assert!((slope * a.1 - b.1).abs() <= 1e-8 * (1.0 + b.1.abs()), "{a:?} vs {b:?}");
        }
        let flipped = d.map_outcome(|y| -y);
        for (a, b) in base.iter().zip(estimates(&flipped).unwrap()) {
            prop_assert!((a.0 + b.0).abs() <= 1e-8 * (1.0 + a.0.abs()));
            prop_assert!((a.1 - b.1).abs() <= 1e-8 * (1.0 + a.1.abs()));
        }
    }

    #[test]
    fn delta_hat_is_positive_semidefinite(seed in 0u64..10_000) {
        let d = random_fittable_dataset(seed, 8, (2, 4), 1, 1, 1, 1);
        let mut r = rng(seed ^ 0x5eed);
        for stack in [Stack::CaceT, Stack::CaceTcIpw, Stack::Tau11, Stack::Ratio(ShareVariant::FromT), Stack::Iv] {
            let p = StackedProblem::new(stack, &d).unwrap();
            let xi: Vec<f64> = (0..p.layout().dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
            let delta = p.scores(&xi).unwrap().delta_hat();
            let eig = delta.clone().symmetric_eigen().eigenvalues;
            let scale = eig.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            prop_assert!(eig.iter().all(|&v| v >= -1e-10 * scale), "{eig}");
        }
    }

    #[test]
    fn density_check_ignores_row_order(seed in 0u64..10_000, n in 10usize..80) {
        let mut r = rng(seed);
        let mut rows: Vec<(f64, bool)> = (0..n)
            .map(|i| (r.gen_range(0.05..0.95), i % 3 == 0))
            .collect();
        let split = |rows: &[(f64, bool)]| -> (Vec<f64>, Vec<bool>) { rows.iter().copied().unzip() };
        let (e, rec) = split(&rows);
        let a = density_check_from(Arm::Treatment, &e, &rec, 10).unwrap();
        rows.shuffle(&mut r);
        let (e, rec) = split(&rows);
        let b = density_check_from(Arm::Treatment, &e, &rec, 10).unwrap();
        prop_assert_eq!(&a.edges, &b.edges);
        for (x, y) in a.lhs_density.iter().zip(&b.lhs_density).chain(a.rhs_density.iter().zip(&b.rhs_density)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn mean_weight_equality_matches_arm_means(seed in 0u64..10_000) {
        let d = random_fittable_dataset(seed, 6, (1, 5), 1, 0, 0, 0);
        let (e1, e0) = propensities(seed, d.n_rows());
        let w = weights_from_propensities(EstimandKind::CaceTcIpw, ShareVariant::FromT, &d, Some(&e1), Some(&e0)).unwrap();
        let mw = mean_weight_equality(&w, &d);
        let arm_mean = |t: bool| {
            let v: Vec<f64> = d.rows().iter().zip(&w.values).filter(|(o, _)| o.treat == t).map(|(_, w)| *w).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        prop_assert!((mw.mean_t - arm_mean(true)).abs() < 1e-12);
        prop_assert!((mw.mean_c - arm_mean(false)).abs() < 1e-12);
        prop_assert!((mw.diff - (mw.mean_t - mw.mean_c)).abs() < 1e-15);
    }

    #[test]
    fn unit_propensities_collapse_to_itt(seed in 0u64..10_000) {
        let d = random_fittable_dataset(seed, 8, (2, 5), 2, 2, 0, 0);
        let ones = vec![1.0; d.n_rows()];
        let w = weights_from_propensities(EstimandKind::CaceTcIpw, ShareVariant::FromT, &d, Some(&ones), Some(&ones)).unwrap();
        prop_assert_eq!(&w.values, &WeightVector::ones(&d).values);
        let ipw = fit_wls(&d, &w.values, &d.covariate_names_wls).unwrap();
        let itt = fit_wls(&d, &ones, &d.covariate_names_wls).unwrap();
        prop_assert!(((ipw.mu_t - ipw.mu_c) - (itt.mu_t - itt.mu_c)).abs() < 1e-12);
    }

    #[test]
    fn cluster_labels_do_not_matter(seed in 0u64..1_000, salt in 1u64..1_000_000) {
        let d = random_fittable_dataset(seed, 12, (3, 6), 1, 1, 1, 1);
        let base = estimates(&d);
        prop_assume!(base.is_some());
        let relabeled = rebuild(&d, |_, o| Observation {
            cluster_id: format!("site-{salt}-{}", o.cluster_id.chars().rev().collect::<String>()),
            ..o.clone()
        });
        prop_assert_eq!(relabeled.n_clusters(), d.n_clusters());
        for (a, b) in base.unwrap().iter().zip(estimates(&relabeled).unwrap()) {
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_reconstructs_itt(
        pi_t in 0.3f64..0.9,
        extra in 0.05f64..0.09,
        rc in 0.1f64..0.2,
        taus in proptest::array::uniform4(-2.0f64..2.0),
    ) {
        // Shares are built to be interior so every stratum is identifiable.
        let s = StrataShares::from_components(pi_t, pi_t + extra, pi_t + extra, rc, ShareVariant::FromT);
        prop_assume!(s.pi_11 > 0.01 && s.pi_10 > 0.01 && s.pi_01 > 0.01 && s.pi_00 > 0.01);
        let [t11, t10, t01, t00] = taus;
        let cace_t = (s.pi_11 * t11 + s.pi_10 * t10) / s.pi_cace_t;
        let cace_tc = (s.pi_11 * t11 + s.pi_10 * t10 + s.pi_01 * t01) / s.pi_cace_tc;
        let itt = s.pi_11 * t11 + s.pi_10 * t10 + s.pi_01 * t01 + s.pi_00 * t00;
        let e = decompose_from_points(itt, cace_t, cace_tc, t11, &s, 1e-3);
        prop_assert!(e.non_identifiable.is_empty());
        prop_assert!((e.tau_10.unwrap() - t10).abs() < 1e-9);
        prop_assert!((e.tau_01.unwrap() - t01).abs() < 1e-9);
        prop_assert!((e.tau_00.unwrap() - t00).abs() < 1e-9);
        prop_assert!((e.reconstructed_itt(&s) - itt).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn trials_are_deterministic_in_the_seed(seed in any::<u64>()) {
        let s = Scenario::new(20, 0.7, 0.5, 0.10, 0.05);
        let a = generate_trial(&s, seed).unwrap();
        let b = generate_trial(&s, seed).unwrap();
        prop_assert_eq!(&a.observed, &b.observed);
        let c = generate_trial(&s, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(&a.observed, &c.observed);
    }
}
