use gep_core::accountant::{
    analytic_order, calibrate_sigma_closed_form, default_orders, epsilon_spent, rdp_compose, rdp_gaussian,
    rdp_subsampled_gaussian, rdp_to_dp, DpBudget, RdpCurve,
};
use proptest::prelude::*;

fn integer_orders() -> Vec<f64> {
    (2..=64).map(f64::from).collect()
}

#[test]
fn full_sampling_matches_plain_gaussian() {
    for sigma in [0.3, 0.7, 1.0, 2.5, 10.0, 100.0] {
        for order in integer_orders() {
            let sub = rdp_subsampled_gaussian(order, 1.0, sigma).unwrap();
            let plain = rdp_gaussian(order, 1.0, sigma);
            assert!((sub - plain).abs() <= 1e-12 * plain, "σ={sigma} α={order}: {sub} vs {plain}");
        }
    }
}

#[test]
fn two_block_release_fits_in_budget() {
    for (eps, delta) in [(8.0, 1e-5), (1.0, 1e-5), (0.5, 1e-6), (2.0, 1e-3)] {
        let budget = DpBudget::new(eps, delta).unwrap();
        let scale = calibrate_sigma_closed_form(&budget, 1).unwrap();
        let order = analytic_order(&budget);
        for (s1, s2) in [(1.0, 1.0), (10.0, 2.0), (0.5, 3.0)] {
            let orders = vec![order];
            let first = RdpCurve::new(orders.clone(), vec![rdp_gaussian(order, s1, s1 * scale)]).unwrap();
            let second = RdpCurve::new(orders, vec![rdp_gaussian(order, s2, s2 * scale)]).unwrap();
            let (spent, _) = rdp_to_dp(&rdp_compose(&[first, second]).unwrap(), delta).unwrap();
            assert!(spent <= eps + 1e-9, "ε={eps}: spent {spent}");
        }
    }
}

#[test]
fn conversion_never_exceeds_any_single_order() {
    let orders = default_orders(1.0, None);
    let curve = RdpCurve::from_fn(&orders, |o| Ok(rdp_gaussian(o, 1.0, 3.0) * 50.0)).unwrap();
    let (eps, best) = rdp_to_dp(&curve, 1e-5).unwrap();
    assert!(orders.contains(&best));
    for (o, c) in orders.iter().zip(curve.costs()) {
        assert!(eps <= c + (1e5f64).ln() / (o - 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn epsilon_is_monotone(sigma in 0.5f64..20.0, q in 0.001f64..1.0, steps in 1usize..500) {
        let orders = default_orders(0.5, None);
        let eps = |s: f64, q: f64, t: usize| epsilon_spent(s, q, t, 1e-5, &orders).unwrap().0;
        let base = eps(sigma, q, steps);
        prop_assert!(eps(sigma * 1.5, q, steps) <= base + 1e-12);
        prop_assert!(eps(sigma, q, steps + 10) >= base - 1e-12);
        prop_assert!(eps(sigma, (q * 1.5).min(1.0), steps) >= base - 1e-12);
    }

    #[test]
    fn subsampled_bound_grows_with_rate_and_order(sigma in 0.5f64..5.0, q in 0.001f64..0.5, order in 2u32..40) {
        let a = f64::from(order);
        let base = rdp_subsampled_gaussian(a, q, sigma).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(rdp_subsampled_gaussian(a, q * 2.0, sigma).unwrap() >= base);
        prop_assert!(rdp_subsampled_gaussian(a + 1.0, q, sigma).unwrap() >= base);
        prop_assert!(base <= rdp_gaussian(a, 1.0, sigma) * (1.0 + 1e-12));
    }

    #[test]
    fn closed_form_keeps_within_budget(eps in 0.1f64..20.0, steps in 1usize..1000) {
        let budget = DpBudget::new(eps, 1e-5).unwrap();
        prop_assume!(eps <= 2.0 * budget.log_inv_delta());
        let sigma = calibrate_sigma_closed_form(&budget, steps).unwrap();
        let (spent, _) = epsilon_spent(sigma, 1.0, steps, 1e-5, &[analytic_order(&budget)]).unwrap();
        prop_assert!(spent <= eps * (1.0 + 1e-12));
    }
}
