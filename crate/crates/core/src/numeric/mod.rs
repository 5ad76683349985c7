//! Exact and conservatively rounded arithmetic.
//!
//! Every capacity decision in the encoders is made with integers or with
//! [`BitCost`] values whose rounding direction is explicit, so a `<=` check
//! between a required size (rounded up) and an available size (rounded down)
//! is always sound.

mod bitcost;
mod geom;

pub use bitcost::{cost_of_ratio, log2_cost, pow2_scaled, BitCost, Rounding, DEFAULT_FRAC_BITS};
pub use geom::{GeomRounded, GeomTable};

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

/// Arbitrary-precision nonnegative integer used for binomials, spills and universes.
pub type BigNat = BigUint;

/// Exact binomial coefficient `C(n, k)`; zero when `k > n`.
pub fn binom(n: &BigNat, k: u64) -> BigNat {
    if let Some(small) = n.to_u64() {
        return binom_u64(small, k);
    }
    let mut acc = BigNat::one();
    for i in 0..k {
        acc *= n - BigNat::from(i);
        acc /= BigNat::from(i + 1);
    }
    acc
}

/// `C(n, k)` for a machine-sized `n`.
pub fn binom_u64(n: u64, k: u64) -> BigNat {
    if k > n {
        return BigNat::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigNat::one();
    // Each fold leaves acc = C(n, i) exactly, so the division is exact.
    let mut chunk: u128 = 1;
    let mut div: u128 = 1;
    for i in 0..k {
        let num = (n - i) as u128;
        let den = (i + 1) as u128;
        match (chunk.checked_mul(num), div.checked_mul(den)) {
            (Some(c), Some(d)) if c < (1u128 << 100) => {
                chunk = c;
                div = d;
            }
            _ => {
                acc *= BigNat::from(chunk);
                acc /= BigNat::from(div);
                chunk = num;
                div = den;
            }
        }
    }
    acc *= BigNat::from(chunk);
    acc / BigNat::from(div)
}

/// `ceil(log2 x)` for `x >= 1` as an integer.
pub fn ceil_log2(x: &BigNat) -> u64 {
    if x.is_zero() || x.is_one() {
        return 0;
    }
    let bits = x.bits();
    let pow = BigNat::one() << (bits - 1);
    if *x == pow {
        bits - 1
    } else {
        bits
    }
}

/// Integer square root rounded up.
pub fn isqrt_ceil(x: &BigNat) -> BigNat {
    let s = x.sqrt();
    if &(&s * &s) < x {
        s + 1u32
    } else {
        s
    }
}
