use depthsal::metrics::{auc_judd, cc, nss, sauc, sim};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(0.0f64..1.0, 64),
        prop::collection::vec(0.001f64..1.0, 64),
        prop::collection::vec(any::<bool>(), 64),
        0usize..64,
    )
        .prop_map(|(p, y, mut b, i)| {
            b[i] = true;
            (p, y, b)
        })
        .prop_filter("map must not be constant", |(p, _, _)| p.iter().any(|&v| (v - p[0]).abs() > 1e-6))
}

proptest! {
    #[test]
    fn cc_and_nss_ignore_positive_affine_maps((p, y, b) in instance(), a in 0.1f64..10.0, c in -5.0f64..5.0) {
        let q: Vec<f64> = p.iter().map(|v| a * v + c).collect();
        prop_assert!((cc(&p, &y).unwrap() - cc(&q, &y).unwrap()).abs() < 1e-9);
        prop_assert!((nss(&p, &b).unwrap() - nss(&q, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn auc_ignores_strictly_monotone_maps((p, _y, b) in instance(), k in 0.5f64..3.0) {
        let q: Vec<f64> = p.iter().map(|v| (k * v).exp()).collect();
        prop_assert_eq!(auc_judd(&p, &b), auc_judd(&q, &b));
        let pool: Vec<usize> = (0..64).step_by(3).collect();
        let s1 = sauc(&p, &b, &pool, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let s2 = sauc(&q, &b, &pool, 4, &mut ChaCha8Rng::seed_from_u64(1));
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn sim_ignores_scale((p, y, _b) in instance(), a in 0.01f64..100.0) {
        let q: Vec<f64> = p.iter().map(|v| a * v + 1e-3).collect();
        let p2: Vec<f64> = p.iter().map(|v| v + 1e-3 / a).collect();
        prop_assert!((sim(&q, &y).unwrap() - sim(&p2, &y).unwrap()).abs() < 1e-9);
        let s = sim(&p2, &y).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
    }
}
