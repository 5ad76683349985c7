use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use num_bigint::BigUint;
use num_traits::{One, Zero};

use crate::error::{Error, Result};

/// Default number of fractional bits carried by a [`BitCost`].
pub const DEFAULT_FRAC_BITS: u32 = 64;

/// Direction in which a real quantity was rounded to fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rounding {
    Up,
    Down,
}

impl Rounding {
    pub fn flip(self) -> Rounding {
        match self {
            Rounding::Up => Rounding::Down,
            Rounding::Down => Rounding::Up,
        }
    }
}

/// A fixed-point number of bits: `raw / 2^frac`.
///
/// The rounding tag records which side of the true real value the number sits
/// on. Addition of two `Up` values is `Up`; subtracting a `Down` value from an
/// `Up` value stays `Up`. The tag is advisory; callers pick the direction that
/// makes their inequality sound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitCost {
    raw: i128,
    frac: u32,
    dir: Rounding,
}

impl BitCost {
    pub fn zero(frac: u32) -> Self {
        BitCost { raw: 0, frac, dir: Rounding::Down }
    }

    pub fn from_raw(raw: i128, frac: u32, dir: Rounding) -> Self {
        BitCost { raw, frac, dir }
    }

    pub fn from_int(v: i64, frac: u32) -> Self {
        BitCost { raw: (v as i128) << frac, frac, dir: Rounding::Down }
    }

    /// Converts a float, rounding in the requested direction.
    pub fn from_f64(x: f64, frac: u32, dir: Rounding) -> Self {
        let scaled = x * (frac as f64).exp2();
        let raw = match dir {
            Rounding::Up => scaled.ceil(),
            Rounding::Down => scaled.floor(),
        } as i128;
        BitCost { raw, frac, dir }
    }

    pub fn raw(&self) -> i128 {
        self.raw
    }

    pub fn frac(&self) -> u32 {
        self.frac
    }

    pub fn rounding(&self) -> Rounding {
        self.dir
    }

    pub fn with_rounding(mut self, dir: Rounding) -> Self {
        self.dir = dir;
        self
    }

    /// One unit in the last place.
    pub fn ulp(frac: u32) -> Self {
        BitCost { raw: 1, frac, dir: Rounding::Up }
    }

    pub fn to_f64(&self) -> f64 {
        self.raw as f64 / (self.frac as f64).exp2()
    }

    pub fn floor_int(&self) -> i128 {
        self.raw >> self.frac
    }

    pub fn ceil_int(&self) -> i128 {
        -((-self.raw) >> self.frac)
    }

    pub fn scale(self, k: i64) -> Self {
        BitCost { raw: self.raw * k as i128, ..self }
    }

    pub fn is_negative(&self) -> bool {
        self.raw < 0
    }

    fn check(&self, other: &Self) {
        debug_assert_eq!(self.frac, other.frac, "mixed fixed-point precisions");
    }
}

impl PartialOrd for BitCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BitCost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.check(other);
        self.raw.cmp(&other.raw)
    }
}

impl Add for BitCost {
    type Output = BitCost;
    fn add(self, rhs: BitCost) -> BitCost {
        self.check(&rhs);
        BitCost { raw: self.raw + rhs.raw, frac: self.frac, dir: self.dir }
    }
}

impl Sub for BitCost {
    type Output = BitCost;
    fn sub(self, rhs: BitCost) -> BitCost {
        self.check(&rhs);
        BitCost { raw: self.raw - rhs.raw, frac: self.frac, dir: self.dir }
    }
}

impl Neg for BitCost {
    type Output = BitCost;
    fn neg(self) -> BitCost {
        BitCost { raw: -self.raw, frac: self.frac, dir: self.dir.flip() }
    }
}

impl fmt::Display for BitCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.to_f64())
    }
}

/// Fixed-point `log2(x)` with `frac` fractional bits, rounded as requested.
///
/// `Down` is at most the true value, `Up` at least, and the two differ by at
/// most two units in the last place. Powers of two are exact.
pub fn log2_cost(x: &BigUint, dir: Rounding, frac: u32) -> Result<BitCost> {
    if x.is_zero() {
        return Err(Error::Domain("log2 of zero".into()));
    }
    let (down, up) = log2_bounds(x, frac);
    let raw = match dir {
        Rounding::Down => down,
        Rounding::Up => up,
    };
    Ok(BitCost { raw, frac, dir })
}

fn log2_bounds(x: &BigUint, frac: u32) -> (i128, i128) {
    let int_part = x.bits() - 1;
    let base = (int_part as i128) << frac;
    if x.trailing_zeros() == Some(int_part) {
        return (base, base);
    }
    let prec = 2 * frac as u64 + 32;
    let one = BigUint::one() << prec;
    let two = BigUint::one() << (prec + 1);
    // Mantissa in [1, 2) scaled by 2^prec, truncated and rounded up.
    let (mut lo, mut hi) = if int_part <= prec {
        let m = x << (prec - int_part);
        (m.clone(), m)
    } else {
        let shift = int_part - prec;
        let m = x >> shift;
        let exact = (&m << shift) == *x;
        let h = if exact { m.clone() } else { &m + 1u32 };
        (m, h)
    };
    let mut down: i128 = 0;
    let mut up: i128 = 0;
    for _ in 0..frac {
        down <<= 1;
        up <<= 1;
        lo = (&lo * &lo) >> prec;
        if lo >= two {
            down |= 1;
            lo >>= 1;
        }
        let sq = &hi * &hi;
        let mut h2 = &sq >> prec;
        if (&h2 << prec) != sq {
            h2 += 1u32;
        }
        hi = h2;
        if hi >= two {
            up |= 1;
            let odd = hi.bit(0);
            hi >>= 1;
            if odd {
                hi += 1u32;
            }
        }
    }
    debug_assert!(lo >= one);
    let down_raw = base + down;
    let up_raw = (base + up + 1).min(down_raw + 2);
    (down_raw, up_raw)
}

/// `log2(den / num)` as a cost, i.e. the bits needed for an event of
/// probability `num / den`, rounded as requested.
pub fn cost_of_ratio(num: &BigUint, den: &BigUint, dir: Rounding, frac: u32) -> Result<BitCost> {
    let d = log2_cost(den, dir, frac)?;
    let n = log2_cost(num, dir.flip(), frac)?;
    Ok((d - n).with_rounding(dir))
}

struct RootTable {
    prec: u64,
    lo: Vec<BigUint>,
    hi: Vec<BigUint>,
}

fn root_table(frac: u32) -> Arc<RootTable> {
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<RootTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().expect("root table lock").get(&frac) {
        return t.clone();
    }
    let prec = frac as u64 + 64;
    let mut lo = Vec::with_capacity(frac as usize);
    let mut hi = Vec::with_capacity(frac as usize);
    // r_j = 2^(2^-(j+1)), scaled by 2^prec.
    let mut cur_lo = BigUint::from(2u32) << prec;
    let mut cur_hi = cur_lo.clone();
    for _ in 0..frac {
        cur_lo = (&cur_lo << prec).sqrt();
        cur_hi = super::isqrt_ceil(&(&cur_hi << prec));
        lo.push(cur_lo.clone());
        hi.push(cur_hi.clone());
    }
    let t = Arc::new(RootTable { prec, lo, hi });
    cache.lock().expect("root table lock").insert(frac, t.clone());
    t
}

/// `c * 2^e` rounded down (`Down`) or up (`Up`) to an integer.
pub fn pow2_scaled(c: &BigUint, e: BitCost, dir: Rounding) -> BigUint {
    let frac = e.frac();
    let int_part = e.raw() >> frac;
    let fpart = (e.raw() - (int_part << frac)) as u128;
    let table = root_table(frac);
    let prec = table.prec;
    let mut m = BigUint::one() << prec;
    for j in 0..frac as usize {
        // Bit of weight 2^-(j+1).
        if (fpart >> (frac as usize - 1 - j)) & 1 == 1 {
            let r = match dir {
                Rounding::Down => &table.lo[j],
                Rounding::Up => &table.hi[j],
            };
            let prod = &m * r;
            let mut next = &prod >> prec;
            if dir == Rounding::Up && (&next << prec) != prod {
                next += 1u32;
            }
            m = next;
        }
    }
    let num = c * m;
    let shift = int_part - prec as i128;
    if shift >= 0 {
        num << shift as u64
    } else {
        let s = (-shift) as u64;
        let q = &num >> s;
        if dir == Rounding::Up && (&q << s) != num {
            q + 1u32
        } else {
            q
        }
    }
}
