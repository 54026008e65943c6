use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subspace_gossip::data::block_sizes;
use subspace_gossip::gossip::{alpha, stepsize};
use subspace_gossip::manifold::{dist_sq, exp_map, log_map, principal_angles, random_subspace};
use subspace_gossip::verify::random_tangent;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocks_cover_and_balance(total in 1usize..5000, parts in 1usize..64) {
        prop_assume!(parts <= total);
        let sizes = block_sizes(total, parts).unwrap();
        prop_assert_eq!(sizes.len(), parts);
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(lo >= 1 && hi - lo <= 1);
    }

    #[test]
    fn stepsizes_decrease_and_sum_diverges(a in 1e-6f64..10.0, b in 1e-4f64..1.0, k in 0usize..100_000) {
        let now = stepsize(k, a, b);
        prop_assert!(now > 0.0);
        prop_assert!(stepsize(k + 1, a, b) < now);
        // harmonic lower bound, so Σγ_k diverges
        prop_assert!(now >= a / ((1.0 + b) * (k as f64 + 1.0)) * (1.0 - 1e-12));
        prop_assert!(now <= a);
    }

    #[test]
    fn chain_weights(n in 2usize..50, i in 1usize..50) {
        prop_assume!(i <= n);
        let expected = if i == 1 || i == n { 1.0 } else { 0.5 };
        prop_assert_eq!(alpha(i, n).unwrap(), expected);
    }

    #[test]
    fn exp_then_log_recovers_short_tangents(seed in any::<u64>(), m in 2usize..20, r in 1usize..5, len in 0.0f64..0.5) {
        prop_assume!(r < m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_subspace(m, r, &mut rng).unwrap();
        let xi = random_tangent(&u, len, &mut rng).unwrap();
        let v = exp_map(&u, &xi, 1.0).unwrap();
        prop_assert!(v.residual() <= 1e-12);
        let back = log_map(&u, &v).unwrap();
        prop_assert!((back.direction() - xi.direction()).norm() <= 1e-9);
        prop_assert!((dist_sq(&u, &v).unwrap() - 0.5 * len * len).abs() <= 1e-12);
    }

    #[test]
    fn distance_is_symmetric_and_bounded(seed in any::<u64>(), m in 2usize..20, r in 1usize..5) {
        prop_assume!(r < m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_subspace(m, r, &mut rng).unwrap();
        let v = random_subspace(m, r, &mut rng).unwrap();
        let (uv, vu) = (dist_sq(&u, &v).unwrap(), dist_sq(&v, &u).unwrap());
        prop_assert!((uv - vu).abs() <= 1e-12, "{} vs {}", uv, vu);
        let angles = principal_angles(&u, &v).unwrap();
        prop_assert!(angles.max() <= std::f64::consts::FRAC_PI_2 + 1e-12);
        prop_assert!(uv <= 0.5 * r as f64 * std::f64::consts::FRAC_PI_2.powi(2) + 1e-12);
    }
}
