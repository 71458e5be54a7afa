use cen_core::gradcheck::{cen_forward_check, op_suite};

#[test]
fn every_op_matches_finite_differences() {
    let mut instances = 0;
    for seed in 0..4 {
        for outcome in op_suite(seed).unwrap() {
            assert!(outcome.passed(), "seed {seed}: {outcome:?}");
            instances += 1;
        }
    }
    assert!(instances >= 20);
}

#[test]
fn full_network_with_exchange_matches_finite_differences() {
    for seed in 0..3 {
        let (outcome, replaced) = cen_forward_check(seed, 60).unwrap();
        assert!(replaced > 0, "exchange inactive for seed {seed}");
        assert!(outcome.passed(), "seed {seed}: {outcome:?}");
    }
}
