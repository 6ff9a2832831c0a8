use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use submia::eval::auc;

/// Independent O(n·m) pair count.
fn brute_force(m: &[f64], n: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in m {
        for &b in n {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (m.len() * n.len()) as f64
}

/// Coarse values so ties are frequent.
fn scores() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![(-20i32..20).prop_map(|v| v as f64 / 4.0), -5.0f64..5.0], 1..=200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_pair_counting(m in scores(), n in scores()) {
        let fast = auc(&m, &n).unwrap();
        prop_assert!((fast - brute_force(&m, &n)).abs() <= 1e-12, "{} vs {}", fast, brute_force(&m, &n));
    }

    #[test]
    fn invariant_under_monotone_maps(m in scores(), n in scores(), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let base = auc(&m, &n).unwrap();
        let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        let aff = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        prop_assert_eq!(auc(&exp(&m), &exp(&n)).unwrap(), base);
        prop_assert_eq!(auc(&aff(&m), &aff(&n)).unwrap(), base);
    }

    #[test]
    fn swapping_sides_reflects(m in scores(), n in scores()) {
        prop_assert!((auc(&m, &n).unwrap() + auc(&n, &m).unwrap() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn random_scores_on_a_balanced_split_sit_near_half() {
    let (n, m) = (1000usize, 1000usize);
    // null standard deviation of the Mann-Whitney statistic
    let sd = (((n + m + 1) as f64) / (12.0 * n as f64 * m as f64)).sqrt();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let v = auc(&a, &b).unwrap();
        assert!((v - 0.5).abs() <= 3.0 * sd, "seed {seed}: {v}");
    }
}
