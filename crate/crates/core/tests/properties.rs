use npmle::certifier::certify_global_max;
use npmle::kernel::{d_derivative, expected_d_identity, sup_d_over_interval, Dataset};
use npmle::mixtures::{make_mixture, merge_adjacent, w1_distance, DiscreteMixture};
use npmle::pipeline::{solve_npmle, SolveConfig, SolveReport};
use proptest::prelude::*;

/// Sorted, well-separated locations with normalized positive weights.
fn mixture() -> impl Strategy<Value = DiscreteMixture> {
    prop::collection::vec((0.05f64..1.0, 0.01f64..1.5), 1..6).prop_map(|atoms| {
        let mut y = -4.0;
        let mut locs = Vec::new();
        let mut w = Vec::new();
        for (weight, step) in atoms {
            y += step;
            locs.push(y);
            w.push(weight);
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        make_mixture(&w, &locs).unwrap()
    })
}

fn dataset(max_n: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec(-3.0f64..3.0, 1..max_n).prop_map(|x| Dataset::new(&x).unwrap())
}

fn solve(data: &Dataset) -> SolveReport {
    match solve_npmle(data, &SolveConfig::default()) {
        Ok(r) => r,
        Err(npmle::error::NpmleError::RefinementExhausted(r)) => *r,
        Err(e) => panic!("{e}"),
    }
}

proptest! {
    #[test]
    fn w1_is_a_metric(a in mixture(), b in mixture(), c in mixture()) {
        prop_assert!(w1_distance(&a, &a) <= 1e-15);
        prop_assert!((w1_distance(&a, &b) - w1_distance(&b, &a)).abs() <= 1e-12);
        prop_assert!(w1_distance(&a, &c) <= w1_distance(&a, &b) + w1_distance(&b, &c) + 1e-12);
    }

    #[test]
    fn merge_preserves_mass_and_mean(m in mixture(), gap in 0.0f64..2.0) {
        let merged = merge_adjacent(&m, gap);
        let mass: f64 = merged.weights().iter().sum();
        prop_assert!((mass - 1.0).abs() <= 1e-12);
        prop_assert!((merged.mean() - m.mean()).abs() <= 1e-12);
        prop_assert!(merged.k() <= m.k());
        prop_assert!(merged.locations().windows(2).all(|w| w[1] - w[0] > gap));
    }

    #[test]
    fn expected_d_is_one(m in mixture(), x in dataset(30)) {
        prop_assert!((expected_d_identity(&m, &x) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences(m in mixture(), x in dataset(15), y in -4.0f64..4.0) {
        let h = 1e-5;
        for j in 0..3 {
            let fd = (d_derivative(&m, &x, y + h, j).unwrap() - d_derivative(&m, &x, y - h, j).unwrap())
                / (2.0 * h);
            let exact = d_derivative(&m, &x, y, j + 1).unwrap();
            let scale = d_derivative(&m, &x, y, 0).unwrap().max(1.0);
            prop_assert!((fd - exact).abs() <= 1e-5 * scale, "j={} fd={} exact={}", j, fd, exact);
        }
    }

    #[test]
    fn interval_sup_dominates_samples(m in mixture(), x in dataset(12), lo in -5.0f64..4.0, w in 0.01f64..3.0) {
        let hi = lo + w;
        let bound = sup_d_over_interval(&m, &x, lo, hi, 1e-10).unwrap();
        for i in 0..=400 {
            let y = lo + w * i as f64 / 400.0;
            prop_assert!(d_derivative(&m, &x, y, 0).unwrap() <= bound + 1e-12);
        }
    }

    #[test]
    fn global_max_excess_dominates_samples(m in mixture(), x in dataset(12)) {
        let delta = certify_global_max(&m, &x, 1e-10);
        let sampled = (0..=2000)
            .map(|i| d_derivative(&m, &x, -8.0 + 16.0 * i as f64 / 2000.0, 0).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(sampled - 1.0 <= delta + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solve_is_deterministic(x in dataset(8)) {
        let a = solve(&x);
        let b = solve(&x);
        prop_assert_eq!(a.final_mixture, b.final_mixture);
        prop_assert_eq!(a.certificate.to_json(), b.certificate.to_json());
    }

    #[test]
    fn newton_limit_within_certified_radius(x in dataset(10)) {
        let r = solve(&x);
        if r.certificate.is_complete() && r.newton_trace.as_ref().is_some_and(|t| t.converged) {
            let w1 = r.certificate.w1_bound.unwrap();
            prop_assert!(w1_distance(&r.final_mixture, &r.candidate) <= w1 + 1e-9);
        }
    }
}
