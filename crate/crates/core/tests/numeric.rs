use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use proptest::prelude::*;
use tabtreap::numeric::{
    binom, binom_u64, cost_of_ratio, log2_cost, pow2_scaled, BitCost, GeomTable, Rounding,
};

fn big(x: u64) -> BigUint {
    BigUint::from(x)
}

#[test]
fn binom_examples() {
    assert_eq!(binom(&big(4096), 3), big(4096 * 4095 * 4094 / 6));
    assert_eq!(binom(&big(4096), 3), big(11_444_858_880));
    assert_eq!(binom(&big(77), 0), big(1));
    assert_eq!(binom(&big(5), 6), big(0));
    let huge = BigUint::one() << 100u32;
    assert_eq!(binom(&huge, 1), huge);
}

#[test]
fn binom_pascal_exhaustive() {
    // Oracle: Pascal's triangle built by addition only.
    let mut row = vec![big(1)];
    for n in 0u64..=64 {
        for k in 0..=64u64 {
            let expect = row.get(k as usize).cloned().unwrap_or_default();
            assert_eq!(binom_u64(n, k), expect, "C({n},{k})");
        }
        let mut next = vec![big(1)];
        for k in 1..row.len() {
            next.push(&row[k - 1] + &row[k]);
        }
        next.push(big(1));
        row = next;
    }
}

#[test]
fn log2_examples() {
    let f = 64;
    assert_eq!(log2_cost(&big(1), Rounding::Up, f).unwrap().raw(), 0);
    assert_eq!(log2_cost(&big(1024), Rounding::Up, f).unwrap(), BitCost::from_raw(10 << 64, 64, Rounding::Up));
    let up = log2_cost(&big(6), Rounding::Up, f).unwrap();
    assert!((up.to_f64() - 6f64.log2()).abs() < 1e-12);
    assert!(log2_cost(&big(0), Rounding::Up, f).is_err());
}

/// Exact oracle at F = 16: log2 x >= d / 2^F iff x^(2^F) >= 2^d.
fn check_exact_bracket(x: u64) {
    let f = 16u32;
    let down = log2_cost(&big(x), Rounding::Down, f).unwrap().raw();
    let up = log2_cost(&big(x), Rounding::Up, f).unwrap().raw();
    let lhs = big(x).pow(1u32 << f);
    assert!(lhs >= BigUint::one() << (down as u64), "down too high for {x}");
    assert!(lhs <= BigUint::one() << (up as u64), "up too low for {x}");
    assert!(up - down <= 2);
}

#[test]
fn log2_brackets_truth_exactly() {
    for x in [2u64, 3, 5, 6, 7, 10, 255, 1000, 65535, 1 << 20, (1 << 20) + 1] {
        check_exact_bracket(x);
    }
}

#[test]
fn cost_of_ratio_quarter() {
    let c = cost_of_ratio(&big(1), &big(4), Rounding::Up, 64).unwrap();
    assert_eq!(c.raw(), 2i128 << 64);
}

#[test]
fn pow2_scaled_brackets() {
    let e = BitCost::from_f64(10.5, 64, Rounding::Down);
    let lo = pow2_scaled(&big(1), e, Rounding::Down);
    let hi = pow2_scaled(&big(1), e, Rounding::Up);
    // 2^10.5 = 1448.15...
    assert_eq!(lo, big(1448));
    assert_eq!(hi, big(1449));
    let exact = BitCost::from_int(7, 64);
    assert_eq!(pow2_scaled(&big(3), exact, Rounding::Up), big(3 * 128));
    assert_eq!(pow2_scaled(&big(3), exact, Rounding::Down), big(3 * 128));
    let neg = BitCost::from_int(-3, 64);
    assert_eq!(pow2_scaled(&big(20), neg, Rounding::Up), big(3));
    assert_eq!(pow2_scaled(&big(20), neg, Rounding::Down), big(2));
}

/// Oracle: linear scan over t with exact rationals (N+1)^t / N^t.
fn brute_round(x: u64, nmax: u64) -> (u64, u64) {
    let n = big(nmax.pow(3));
    let n1 = &n + 1u32;
    let mut t = 0u32;
    loop {
        let v = n1.pow(t) / n.pow(t);
        if v >= big(x) {
            return (t as u64, v.to_u64().unwrap());
        }
        t += 1;
    }
}

#[test]
fn geometric_rounding_matches_scan() {
    let table = GeomTable::new(4);
    for x in [1u64, 2, 63, 64, 65, 100, 999, 1000, 1001, 5000] {
        let r = table.round_up(&big(x));
        let (t, v) = brute_round(x, 4);
        assert_eq!((r.t, r.value.to_u64().unwrap()), (t, v), "x = {x}");
    }
    let one = table.round_up(&big(1));
    assert_eq!((one.t, one.value), (0, big(1)));
}

#[test]
fn geometric_rounding_identity_below_cube() {
    let table = GeomTable::new(4);
    for x in 1..64u64 {
        assert_eq!(table.round_up(&big(x)).value, big(x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn log2_bracket_and_gap(x in 1u64..u64::MAX, shift in 0u32..300) {
        let v = BigUint::from(x) << shift;
        let down = log2_cost(&v, Rounding::Down, 64).unwrap();
        let up = log2_cost(&v, Rounding::Up, 64).unwrap();
        prop_assert!(down <= up);
        prop_assert!(up.raw() - down.raw() <= 2);
        let approx = (x as f64).log2() + shift as f64;
        prop_assert!((down.to_f64() - approx).abs() < 1e-9 * approx.max(1.0));
    }

    #[test]
    fn geometric_rounding_properties(x in 1u64..10_000_000, nmax in 2u64..12) {
        let table = GeomTable::new(nmax);
        let r = table.round_up(&big(x));
        prop_assert!(r.value >= big(x));
        if r.t > 0 {
            prop_assert!(table.value_at(r.t - 1) < big(x));
        }
        // Idempotent.
        prop_assert_eq!(table.round_up(&r.value), r.clone());
        let cube = nmax.pow(3);
        if x < cube {
            prop_assert_eq!(r.value.clone(), big(x));
        } else {
            // value / x <= 1 + 1/nmax^3
            prop_assert!(r.value.to_u64().unwrap() as u128 * cube as u128 <= x as u128 * (cube as u128 + 1));
        }
    }
}
