use proptest::prelude::*;
use tsde::markov::{
    mixing_time, n_step_distribution, stationary_distribution, GilbertElliott, TransitionMatrix,
};

fn ge() -> impl Strategy<Value = GilbertElliott> {
    (0.02f64..0.98, 0.02f64..0.98).prop_map(|(p01, p11)| GilbertElliott::new(p01, p11).unwrap())
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn stationary_is_fixed_point(g in ge()) {
        let p = g.matrix();
        let pi = stationary_distribution(&p).unwrap();
        prop_assert!(l1(&p.propagate(&pi), &pi) <= 1e-10);
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn products_stay_stochastic(g in ge(), h in ge(), k in 1usize..40) {
        let m = g.matrix().mul(&h.matrix()).pow(k);
        prop_assert!(m.max_row_defect() <= 1e-12);
    }

    #[test]
    fn n_step_matches_matrix_powers(g in ge(), s in 0usize..2) {
        let arm = g.arm();
        let p = g.matrix();
        let mut passive = TransitionMatrix::identity(2);
        for n in 1..=64 {
            let want = arm.active().mul(&passive);
            let got = n_step_distribution(&arm, s, n).unwrap();
            prop_assert!(l1(&got, want.row(s)) <= 1e-12, "n = {}", n);
            passive = passive.mul(&p);
        }
    }

    #[test]
    fn predictive_closeness_after_mixing(g in ge(), s in 0usize..2, eps_pick in 0usize..2) {
        let eps: f64 = [1.0 / 8.0, 1.0 / 32.0][eps_pick];
        let arm = g.arm();
        let quarter = mixing_time(&g.matrix(), 0.25).unwrap();
        let start = ((1.0 / eps).log2() * quarter as f64).floor() as usize + 1;
        let base = n_step_distribution(&arm, s, start).unwrap();
        for n in start..start + 100 {
            let other = n_step_distribution(&arm, s, n).unwrap();
            prop_assert!(l1(&base, &other) <= 2.0 * 2.0 * eps);
        }
    }

    #[test]
    fn mixing_time_log_bound(g in ge()) {
        let p = g.matrix();
        let quarter = mixing_time(&p, 0.25).unwrap();
        for eps in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 64.0] {
            let bound = (1.0f64 / eps).log2().ceil() as usize * quarter;
            prop_assert!(mixing_time(&p, eps).unwrap() <= bound);
        }
        prop_assert!(mixing_time(&p, 0.1).unwrap() >= quarter);
    }
}
