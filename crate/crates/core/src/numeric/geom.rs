use std::collections::HashMap;
use std::sync::RwLock;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};

/// `value = floor((1 + 1/nmax^3)^t)`, the smallest such power not below the input.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GeomRounded {
    pub t: u64,
    pub value: BigUint,
}

/// Lazily filled table of geometric rounding points for one `nmax`.
///
/// Powers are evaluated as fixed-point intervals; the exact rational power is
/// used only when the interval straddles an integer.
#[derive(Debug)]
pub struct GeomTable {
    nmax: u64,
    denom: u64,
    values: RwLock<HashMap<u64, BigUint>>,
    rounded: RwLock<HashMap<BigUint, GeomRounded>>,
}

const PREC: u64 = 256;

impl GeomTable {
    pub fn new(nmax: u64) -> Self {
        let nmax = nmax.max(1);
        GeomTable {
            nmax,
            denom: nmax.saturating_pow(3),
            values: RwLock::new(HashMap::new()),
            rounded: RwLock::new(HashMap::new()),
        }
    }

    pub fn nmax(&self) -> u64 {
        self.nmax
    }

    /// `floor((1 + 1/nmax^3)^t)`.
    pub fn value_at(&self, t: u64) -> BigUint {
        if let Some(v) = self.values.read().expect("geom lock").get(&t) {
            return v.clone();
        }
        let v = self.compute(t);
        self.values.write().expect("geom lock").insert(t, v.clone());
        v
    }

    fn compute(&self, t: u64) -> BigUint {
        let n = BigUint::from(self.denom);
        let n1 = BigUint::from(self.denom + 1);
        let scaled = &n1 << PREC;
        let base_lo = &scaled / &n;
        let base_hi = if (&base_lo * &n) == scaled { base_lo.clone() } else { &base_lo + 1u32 };
        let lo = pow_fixed(&base_lo, t, false);
        let hi = pow_fixed(&base_hi, t, true);
        let flo = &lo >> PREC;
        let fhi = &hi >> PREC;
        if flo == fhi {
            return flo;
        }
        n1.pow(t as u32) / n.pow(t as u32)
    }

    /// Smallest rounding point `>= x` together with its exponent.
    pub fn round_up(&self, x: &BigUint) -> GeomRounded {
        assert!(*x >= BigUint::one(), "geometric rounding needs x >= 1");
        if let Some(r) = self.rounded.read().expect("geom lock").get(x) {
            return r.clone();
        }
        let ln_x = ln_big(x);
        let ln_base = (1.0 / self.denom as f64).ln_1p();
        let mut t = (ln_x / ln_base).ceil().max(0.0) as u64;
        while t > 0 && self.value_at(t - 1) >= *x {
            t -= 1;
        }
        while self.value_at(t) < *x {
            t += 1;
        }
        let r = GeomRounded { t, value: self.value_at(t) };
        self.rounded.write().expect("geom lock").insert(x.clone(), r.clone());
        r
    }
}

fn pow_fixed(base: &BigUint, mut e: u64, up: bool) -> BigUint {
    let mut acc = BigUint::one() << PREC;
    let mut b = base.clone();
    let mul = |x: &BigUint, y: &BigUint| -> BigUint {
        let p = x * y;
        let q = &p >> PREC;
        if up && (&q << PREC) != p {
            q + 1u32
        } else {
            q
        }
    };
    while e > 0 {
        if e & 1 == 1 {
            acc = mul(&acc, &b);
        }
        e >>= 1;
        if e > 0 {
            b = mul(&b, &b);
        }
    }
    acc
}

fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64().unwrap_or(u64::MAX) as f64).ln();
    }
    let top = (x >> (bits - 64)).to_u64().unwrap_or(u64::MAX) as f64;
    top.ln() + (bits - 64) as f64 * std::f64::consts::LN_2
}
