use dynkin::measure::{assignment, check_coupling_inequality, wasserstein_p, wasserstein_pp, MeasureSlice};
use proptest::prelude::*;

fn sample(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..=max)
}

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
    })
}

fn uniform(v: &[f64]) -> MeasureSlice {
    MeasureSlice::uniform(v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn quantile_coupling_is_optimal((x, y) in pair(6), p in 1.0f64..4.0) {
        let cost: Vec<Vec<f64>> = x.iter().map(|a| y.iter().map(|b| (a - b).abs().powf(p)).collect()).collect();
        let best = assignment(&cost).0 / x.len() as f64;
        let w = wasserstein_pp(&uniform(&x), &uniform(&y), p).unwrap();
        prop_assert!((w - best).abs() <= 1e-9 * (1.0 + best), "{w} vs {best}");
    }

    #[test]
    fn coupling_inequality((x, y) in pair(40), p in 1.0f64..4.0) {
        let c = check_coupling_inequality(&x, &y, p).unwrap();
        prop_assert!(c.holds, "{c:?}");
    }

    #[test]
    fn triangle_inequality(a in sample(12), b in sample(12), c in sample(12), p in 1.0f64..4.0) {
        let (a, b, c) = (uniform(&a), uniform(&b), uniform(&c));
        let ab = wasserstein_p(&a, &b, p).unwrap();
        let bc = wasserstein_p(&b, &c, p).unwrap();
        let ac = wasserstein_p(&a, &c, p).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ac));
    }

    #[test]
    fn symmetric_and_zero_on_diagonal(a in sample(12), b in sample(12), p in 1.0f64..4.0) {
        let (a, b) = (uniform(&a), uniform(&b));
        let ab = wasserstein_pp(&a, &b, p).unwrap();
        let ba = wasserstein_pp(&b, &a, p).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert_eq!(wasserstein_pp(&a, &a, p).unwrap(), 0.0);
    }

    #[test]
    fn translation_moves_by_the_shift(a in sample(12), s in -10.0f64..10.0) {
        let shifted: Vec<f64> = a.iter().map(|v| v + s).collect();
        let w = wasserstein_p(&uniform(&a), &uniform(&shifted), 2.0).unwrap();
        prop_assert!((w - s.abs()).abs() <= 1e-9 * (1.0 + s.abs()));
    }
}
