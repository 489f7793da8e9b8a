mod common;

use common::oracles::{hashing_case, positive_sign_share};
use episeg::hashing::{build_hashing, HashingSpec};
use proptest::prelude::*;

#[test]
fn hashed_forward_equals_dense_matrix() {
    for seed in 0..100 {
        assert!(hashing_case(seed), "case {seed}");
    }
}

#[test]
fn signs_are_balanced() {
    let share = positive_sign_share();
    assert!((share - 0.5).abs() < 0.02, "positive share {share}");
}

#[test]
fn tables_are_a_function_of_seed_and_shape() {
    let a = build_hashing(11, 64, 65).unwrap();
    assert_eq!(a, build_hashing(11, 64, 65).unwrap());
    assert_ne!(a.kappa(), build_hashing(12, 64, 65).unwrap().kappa());
}

#[test]
fn zero_dimensions_rejected() {
    assert!(build_hashing(0, 0, 4).is_err());
    assert!(build_hashing(0, 4, 0).is_err());
}

#[test]
fn explicit_tables_are_validated() {
    assert!(HashingSpec::from_tables(0, 2, vec![0, 2], vec![1.0, -1.0]).is_err());
    assert!(HashingSpec::from_tables(0, 2, vec![0, 1], vec![1.0, 0.5]).is_err());
    let spec = HashingSpec::from_tables(0, 2, vec![1, 0, 1], vec![1.0, -1.0, -1.0]).unwrap();
    assert_eq!(spec.forward(&[3.0, 5.0]).unwrap(), vec![5.0, -3.0, -5.0]);
}

proptest! {
    #[test]
    fn indices_stay_in_range(seed in any::<u64>(), m in 1usize..200, d in 1usize..200) {
        let spec = build_hashing(seed, m, d).unwrap();
        prop_assert_eq!(spec.kappa().len(), d);
        prop_assert!(spec.kappa().iter().all(|&k| k < m));
        prop_assert!(spec.zeta().iter().all(|&z| z == 1.0 || z == -1.0));
    }

    #[test]
    fn wrong_input_length_rejected(m in 1usize..50, extra in 1usize..5) {
        let spec = build_hashing(1, m, 7).unwrap();
        prop_assert!(spec.forward(&vec![0.0; m + extra]).is_err());
    }
}
