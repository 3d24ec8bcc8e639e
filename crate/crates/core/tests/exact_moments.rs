use ilt_core::moments::{
    check_block_inequality, check_series_inequality, expected_in, kernel_powers, moment_bruteforce, moment_exact,
    moments_bruteforce, Arithmetic, Budget, Method, MomentEntry, MomentKey, MomentTable, MomentValue,
};
use ilt_core::walk::StepLaw;
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

fn exact(v: MomentValue) -> BigRational {
    v.as_exact().expect("exact mode").clone()
}

fn srw2() -> StepLaw {
    StepLaw::simple(2).unwrap()
}

#[test]
fn return_probabilities() {
    let t = kernel_powers(&srw2(), 4, Arithmetic::Exact, &Budget::default()).unwrap();
    assert_eq!(t.prob_exact(0, &[0, 0]).unwrap(), BigRational::one());
    assert_eq!(t.prob_exact(2, &[0, 0]).unwrap(), q(1, 4));
    assert_eq!(t.prob_exact(3, &[0, 0]).unwrap(), BigRational::zero());
    assert_eq!(t.prob_exact(4, &[0, 0]).unwrap(), q(9, 64));
}

#[test]
fn expectations() {
    let law = srw2();
    let b = Budget::default();
    assert_eq!(exact(expected_in(&law, 1, 2, Arithmetic::Exact, &b).unwrap()), q(1, 4));
    assert_eq!(exact(expected_in(&law, 2, 2, Arithmetic::Exact, &b).unwrap()), q(25, 64));
    assert_eq!(exact(expected_in(&law, 1, 3, Arithmetic::Exact, &b).unwrap()), q(1, 16));
}

#[test]
fn bernoulli_moments_by_enumeration() {
    let law = srw2();
    let b = Budget::default();
    assert_eq!(moment_bruteforce(&law, 1, 1, 2, &b).unwrap(), q(1, 4));
    assert_eq!(moment_bruteforce(&law, 1, 3, 2, &b).unwrap(), q(1, 4));
    assert_eq!(exact(moment_exact(&law, 1, 2, 2, Arithmetic::Exact, &b).unwrap()), q(1, 4));
}

#[test]
fn formula_agrees_with_enumeration() {
    let law = srw2();
    let b = Budget::default();
    for n in 1..=3u64 {
        let brute = moments_bruteforce(&law, n, &[1, 2], 2, &b).unwrap();
        for (m, bf) in [1u32, 2].into_iter().zip(brute) {
            assert_eq!(exact(moment_exact(&law, n, m, 2, Arithmetic::Exact, &b).unwrap()), bf, "n={n} m={m}");
        }
    }
    // a second law and p = 3
    let l3 = StepLaw::simple(3).unwrap();
    for n in 1..=2u64 {
        let brute = moments_bruteforce(&l3, n, &[1, 2], 3, &b).unwrap();
        for (m, bf) in [1u32, 2].into_iter().zip(brute) {
            assert_eq!(exact(moment_exact(&l3, n, m, 3, Arithmetic::Exact, &b).unwrap()), bf, "d=3 n={n} m={m}");
        }
    }
}

#[test]
fn first_moment_is_expectation() {
    let b = Budget::default();
    for law in [srw2(), StepLaw::simple(3).unwrap()] {
        for p in 2..=3u32 {
            for n in 1..=5u64 {
                assert_eq!(
                    moment_exact(&law, n, 1, p, Arithmetic::Exact, &b).unwrap(),
                    expected_in(&law, n, p, Arithmetic::Exact, &b).unwrap()
                );
            }
        }
    }
}

#[test]
fn enumeration_respects_budget() {
    let b = Budget { max_paths: 1000, ..Budget::default() };
    assert!(moment_bruteforce(&srw2(), 5, 1, 2, &b).is_err());
}

fn exact_table(ns: &[u64], ms: &[u32]) -> MomentTable {
    let mut t = MomentTable::new();
    t.fill_exact(&srw2(), 2, ns, ms, &Budget::default()).unwrap();
    t
}

#[test]
fn block_inequality_small_example() {
    let t = exact_table(&[1, 2], &[1, 2]);
    let r = check_block_inequality(&t, "srw2", 2, &[1, 1], 1).unwrap();
    assert!((r.lhs - 0.625).abs() < 1e-15);
    assert!((r.rhs - 1.0).abs() < 1e-15);
    assert!(r.holds);
    let r = check_block_inequality(&t, "srw2", 2, &[1, 1], 2).unwrap();
    assert!(r.holds);
    let r = check_block_inequality(&t, "srw2", 2, &[2], 2).unwrap();
    assert_eq!(r.lhs, r.rhs);
}

#[test]
fn block_inequality_with_enumerated_moments() {
    let law = srw2();
    let b = Budget::default();
    let mut t = MomentTable::new();
    for n in 1..=2u64 {
        for (m, v) in [1u32, 2].into_iter().zip(moments_bruteforce(&law, n, &[1, 2], 2, &b).unwrap()) {
            t.insert(MomentEntry {
                key: MomentKey { law: "srw2".into(), p: 2, n, m },
                value: MomentValue::Exact(v),
                method: Method::BruteForce,
            });
        }
    }
    assert!(check_block_inequality(&t, "srw2", 2, &[1, 1], 2).unwrap().holds);
}

#[test]
fn series_inequality() {
    let t = exact_table(&[1, 2], &[1, 2]);
    let r = check_series_inequality(&t, "srw2", 2, &[1, 1], 0.0, 2).unwrap();
    assert_eq!((r.lhs, r.rhs), (1.0, 1.0));
    assert!(check_series_inequality(&t, "srw2", 2, &[1, 1], 0.1, 2).unwrap().holds);

    let law = srw2();
    let b = Budget::default();
    let mut t3 = MomentTable::new();
    for n in 1..=2u64 {
        for (m, v) in (1..=3u32).zip(moments_bruteforce(&law, n, &[1, 2, 3], 2, &b).unwrap()) {
            t3.insert(MomentEntry {
                key: MomentKey { law: "srw2".into(), p: 2, n, m },
                value: MomentValue::Exact(v),
                method: Method::BruteForce,
            });
        }
    }
    assert!(check_series_inequality(&t3, "srw2", 2, &[1, 1], 0.5, 3).unwrap().holds);
}

#[test]
fn missing_moment_is_an_error() {
    let t = exact_table(&[1], &[1]);
    assert!(check_block_inequality(&t, "srw2", 2, &[1, 1], 1).is_err());
}

#[test]
fn normalised_moments_stay_in_a_band() {
    // E I_n^m / n^m for p = 2, d = 2 as n doubles
    let law = srw2();
    let b = Budget::default();
    for m in 1..=2u32 {
        let vals: Vec<f64> = [2u64, 4, 8]
            .iter()
            .map(|&n| moment_exact(&law, n, m, 2, Arithmetic::Exact, &b).unwrap().to_f64() / (n as f64).powi(m as i32))
            .collect();
        for w in vals.windows(2) {
            let ratio = w[1] / w[0];
            assert!(ratio.is_finite() && (0.5..4.0).contains(&ratio), "m={m} band {vals:?}");
        }
        eprintln!("m={m}: normalised moments {vals:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kernel_normalised_and_symmetric(d in 2usize..=3, horizon in 0usize..=6) {
        let law = StepLaw::simple(d).unwrap();
        let t = kernel_powers(&law, horizon, Arithmetic::Exact, &Budget::default()).unwrap();
        for i in 0..=horizon {
            prop_assert_eq!(t.layer_mass_exact(i).unwrap(), BigRational::one());
            for x in t.support(i) {
                let neg: Vec<i64> = x.iter().map(|v| -v).collect();
                prop_assert_eq!(t.prob_exact(i, &x), t.prob_exact(i, &neg));
            }
        }
    }

    #[test]
    fn jensen(n in 1u64..=4, p in 2u32..=3, m in 2u32..=3) {
        let law = srw2();
        let b = Budget::default();
        let first = exact(moment_exact(&law, n, 1, p, Arithmetic::Exact, &b).unwrap());
        prop_assert!(first > BigRational::zero());
        let higher = exact(moment_exact(&law, n, m, p, Arithmetic::Exact, &b).unwrap());
        prop_assert!(first.pow(m as i32) <= higher);
    }
}
