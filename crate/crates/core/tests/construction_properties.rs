use markov_mamba::construction::{build_construction_params, closed_form_max_kl, verify_construction, EXACT_TOLERANCE};
use markov_mamba::par::Execution;
use proptest::prelude::*;

const GRID: [(f64, f64); 6] = [(0.5, 0.1), (0.5, 0.01), (1.0, 0.1), (1.0, 0.01), (2.0, 0.1), (2.0, 0.01)];

/// Every count pair up to 200 on each side, both current and first tokens.
#[test]
fn closed_form_stays_within_the_bound_on_the_full_count_grid() {
    for (beta, eps) in GRID {
        let worst = closed_form_max_kl(beta, eps, 200).unwrap();
        assert!(worst <= (1.0 + eps).ln(), "beta {beta} eps {eps}: {worst}");
        assert!((1.0 + eps).ln() <= eps);
    }
}

#[test]
fn logits_stay_positive_on_every_enumerated_prefix() {
    for (beta, eps) in GRID {
        let p = build_construction_params(beta, eps).unwrap();
        let c = verify_construction(&p, beta, eps, 10, Execution::Sequential).unwrap();
        assert!(c.failure.is_none(), "{:?}", c.failure);
        assert!(c.min_logit > 0.0, "beta {beta} eps {eps}: {}", c.min_logit);
        assert!(c.certified);
        assert!(c.max_kl_exact <= EXACT_TOLERANCE);
    }
}

#[test]
fn certificate_is_monotone_in_the_horizon() {
    for (beta, eps) in [(1.0, 0.01), (0.5, 0.1)] {
        let p = build_construction_params(beta, eps).unwrap();
        let mut last = 0.0;
        let mut last_exact = 0.0;
        for t_max in 1..=11 {
            let c = verify_construction(&p, beta, eps, t_max, Execution::Parallel).unwrap();
            assert!(c.max_kl >= last, "t_max {t_max}: {} < {last}", c.max_kl);
            assert!(c.max_kl_exact >= last_exact);
            assert_eq!(c.positions, (1..=t_max).map(|t| 1u64 << t).sum::<u64>());
            last = c.max_kl;
            last_exact = c.max_kl_exact;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Away from the tabulated grid: any β and ε certify at a short horizon.
    #[test]
    fn random_parameters_certify(beta in 0.1..5.0f64, eps in 0.001..0.99f64) {
        let p = build_construction_params(beta, eps).unwrap();
        let c = verify_construction(&p, beta, eps, 7, Execution::Sequential).unwrap();
        prop_assert!(c.certified, "{c:?}");
    }
}
