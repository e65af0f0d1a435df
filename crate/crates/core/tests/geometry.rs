mod common;

use common::GEOMETRY_CHECKS;
use proptest::prelude::*;
use tsmnet::manifold::airm_dist;
use tsmnet::sampling::{random_spd, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn geometry_identities_hold(seed in any::<u64>(), dim in 2usize..=8) {
        for (name, check, tol) in GEOMETRY_CHECKS {
            let err = check(&mut rng(seed), dim);
            prop_assert!(err < tol, "{name}: error {err:e} at dim {dim}, tolerance {tol:e}");
        }
    }

    #[test]
    fn airm_is_a_metric(seed in any::<u64>(), dim in 2usize..=8) {
        let mut r = rng(seed);
        let (a, b, c) = (random_spd(&mut r, dim, 1.5), random_spd(&mut r, dim, 1.5), random_spd(&mut r, dim, 1.5));
        let ab = airm_dist(&a, &b).unwrap();
        prop_assert!(airm_dist(&a, &a).unwrap() < 1e-10);
        prop_assert!((ab - airm_dist(&b, &a).unwrap()).abs() < 1e-9 * ab.max(1.0));
        prop_assert!(airm_dist(&a, &c).unwrap() <= ab + airm_dist(&b, &c).unwrap() + 1e-9);
    }
}

#[test]
fn seeded_suite_is_within_tolerance() {
    for (name, err, tol) in common::geometry_suite(5, 11) {
        assert!(err < tol, "{name}: {err:e} >= {tol:e}");
    }
}
