use drsim::weighting::{
    compute_weights, effective_sample_size, max_marginal_ks, weighted_ks, BalanceEvaluator,
    BalanceSpec, Scheme,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct O(n^2) evaluation of the weighted ECDF gap at every pooled point.
fn brute_force_ks(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let ta: f64 = wa.iter().sum();
    let tb: f64 = wb.iter().sum();
    let mut best = 0.0_f64;
    for &x in a.iter().chain(b) {
        let fa: f64 = a
            .iter()
            .zip(wa)
            .filter(|(v, _)| **v <= x)
            .map(|(_, w)| w)
            .sum::<f64>()
            / ta;
        let fb: f64 = b
            .iter()
            .zip(wb)
            .filter(|(v, _)| **v <= x)
            .map(|(_, w)| w)
            .sum::<f64>()
            / tb;
        best = best.max((fa - fb).abs());
    }
    best
}

#[test]
fn ks_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let na = rng.random_range(1..=50);
        let nb = rng.random_range(1..=50);
        // Coarse values force ties within and across samples.
        let levels = if case % 2 == 0 { 6 } else { 1000 };
        let draw = |rng: &mut ChaCha8Rng, m: usize| -> Vec<f64> {
            (0..m)
                .map(|_| f64::from(rng.random_range(0..levels)))
                .collect()
        };
        let a = draw(&mut rng, na);
        let b = draw(&mut rng, nb);
        // Integer weights keep every partial sum exact.
        let wa: Vec<f64> = (0..na)
            .map(|_| f64::from(rng.random_range(1..=9)))
            .collect();
        let wb: Vec<f64> = (0..nb)
            .map(|_| f64::from(rng.random_range(1..=9)))
            .collect();
        assert_eq!(
            weighted_ks(&a, &wa, &b, &wb).unwrap(),
            brute_force_ks(&a, &wa, &b, &wb),
            "case {case}"
        );
    }
}

#[test]
fn ks_examples() {
    assert_eq!(
        weighted_ks(&[1.0, 2.0], &[1.0, 1.0], &[1.5], &[1.0]).unwrap(),
        0.5
    );
    assert_eq!(
        weighted_ks(&[1.0, 2.0], &[1.0; 2], &[3.0, 4.0], &[1.0; 2]).unwrap(),
        1.0
    );
    assert_eq!(
        weighted_ks(&[1.0, 2.0, 2.0], &[1.0; 3], &[1.0, 2.0, 2.0], &[1.0; 3]).unwrap(),
        0.0
    );
    assert!(weighted_ks(&[1.0], &[0.0], &[1.0], &[1.0]).is_err());
}

fn sample() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|m| {
        (
            prop::collection::vec(-5.0..5.0f64, m),
            prop::collection::vec(0.01..10.0f64, m),
        )
    })
}

proptest! {
    #[test]
    fn ks_is_symmetric((a, wa) in sample(), (b, wb) in sample()) {
        let ab = weighted_ks(&a, &wa, &b, &wb).unwrap();
        let ba = weighted_ks(&b, &wb, &a, &wa).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ks_ignores_weight_scale((a, wa) in sample(), (b, wb) in sample(), c in 0.001..1000.0f64) {
        let scaled: Vec<f64> = wa.iter().map(|w| w * c).collect();
        let base = weighted_ks(&a, &wa, &b, &wb).unwrap();
        let other = weighted_ks(&a, &scaled, &b, &wb).unwrap();
        prop_assert!((base - other).abs() <= 1e-12);
    }

    #[test]
    fn pop_minus_nr_is_one(pis in prop::collection::vec(1e-6..(1.0 - 1e-6), 1..50)) {
        let t = vec![true; pis.len()];
        let pop = compute_weights(&pis, &t, Scheme::Pop).unwrap();
        let nr = compute_weights(&pis, &t, Scheme::Nr).unwrap();
        for (p, n) in pop.as_slice().iter().zip(nr.as_slice()) {
            // Exact up to the rounding of the two quotients.
            prop_assert!((p - n - 1.0).abs() <= 4.0 * f64::EPSILON * p);
        }
    }

    #[test]
    fn ess_bounded_by_count(ws in prop::collection::vec(0.0..100.0f64, 1..60)) {
        let positive = ws.iter().filter(|&&w| w > 0.0).count() as f64;
        prop_assume!(positive > 0.0);
        let ess = effective_sample_size(&ws);
        prop_assert!(ess <= positive * (1.0 + 1e-12));
        prop_assert!(ess >= 1.0 - 1e-12);
    }

    #[test]
    fn ess_equals_count_for_equal_weights(m in 1usize..100, w in 0.001..1e3f64) {
        let ess = effective_sample_size(&vec![w; m]);
        prop_assert!((ess - m as f64).abs() <= 1e-9 * m as f64);
    }
}

#[test]
fn ess_examples() {
    assert!((effective_sample_size(&[1.0, 1.0, 2.0]) - 16.0 / 6.0).abs() < 1e-15);
    assert!(effective_sample_size(&[1.0, 1.0, 1.0, 1e9]) < 1.0 + 1e-8);
    assert!(effective_sample_size(&[1.0, 1.0, 2.0]) < 3.0);
}

#[test]
fn max_marginal_ks_is_max_of_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let covs: Vec<[f64; 4]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
        .collect();
    let t: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.9)).collect();
    for scheme in [Scheme::Pop, Scheme::Nr] {
        let w = compute_weights(&pi, &t, scheme).unwrap();
        let total = max_marginal_ks(&covs, &t, &w).unwrap();
        let mut per = [0.0; 4];
        for (j, slot) in per.iter_mut().enumerate() {
            let a: Vec<f64> = (0..n).filter(|&i| t[i]).map(|i| covs[i][j]).collect();
            let wa: Vec<f64> = (0..n).filter(|&i| t[i]).map(|i| w.as_slice()[i]).collect();
            let reference: Vec<usize> = match scheme {
                Scheme::Pop => (0..n).collect(),
                Scheme::Nr => (0..n).filter(|&i| !t[i]).collect(),
            };
            let b: Vec<f64> = reference.iter().map(|&i| covs[i][j]).collect();
            *slot = weighted_ks(&a, &wa, &b, &vec![1.0; b.len()]).unwrap();
        }
        assert_eq!(total, per.into_iter().fold(0.0, f64::max));
        let eval = BalanceEvaluator::new(&covs, &t, BalanceSpec::new(scheme)).unwrap();
        assert_eq!(eval.max_ks_from_propensity(&pi).unwrap(), total);
    }
}

#[test]
fn identical_respondents_and_reference_balance_perfectly() {
    // Under NR with unit weights, respondents that mirror the nonrespondents give 0.
    let covs: Vec<[f64; 4]> = (0..10).map(|i| [f64::from(i % 5); 4]).collect();
    let t: Vec<bool> = (0..10).map(|i| i < 5).collect();
    let w = compute_weights(&[0.5; 10], &t, Scheme::Nr).unwrap();
    assert_eq!(max_marginal_ks(&covs, &t, &w).unwrap(), 0.0);
}
