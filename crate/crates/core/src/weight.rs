//! The tabulation weight function.
//!
//! A key `x` is split as `x = xhigh * W^4 + xmid * W + xlow`. The weight is
//! `h(x) = A_{f(xhigh)}[xmid * W + xlow]`, where each `A_i` is a concatenation
//! of `W^3` permutations of `[W]` and `f` is a pairwise-independent hash.
//! Permutations are produced on demand by a seeded shuffle and memoised, which
//! is observationally identical to materialising the arrays.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightParams {
    pub w: u64,
    pub a_count: u64,
    pub alpha: u64,
    pub beta: u64,
    pub prime: u64,
    pub perm_seed: u64,
    pub umax: u64,
    pub domain_top: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyParts {
    pub xlow: u64,
    pub xmid: u64,
    pub xhigh: u64,
    pub xhighmid: u64,
    pub xmidlow: u64,
}

/// Describes the weight sequence of a short range as a window into `A_i ++ A_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProfileTuple {
    pub i: u64,
    pub j: u64,
    pub a_off: u64,
    pub b_off: u64,
}

struct Perm {
    fwd: Vec<u16>,
    inv: Vec<u16>,
}

pub struct WeightFn {
    params: WeightParams,
    w3: u64,
    w4: u64,
    perms: RwLock<HashMap<(u64, u64), Arc<Perm>>>,
}

impl std::fmt::Debug for WeightFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeightFn").field("params", &self.params).finish()
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2u64;
    while d.saturating_mul(d) <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl WeightFn {
    /// Draws the hash coefficients and permutation seed from `seed`.
    pub fn new(w: u64, a_count: u64, seed: u64, umax: u64) -> Result<Self> {
        if w < 2 || !w.is_power_of_two() || w > 1 << 15 {
            return Err(Error::Config(format!("weight range W = {w} must be a power of two in [2, 2^15]")));
        }
        if a_count < 2 {
            return Err(Error::Config("A_count must be at least 2".into()));
        }
        let w4 = w.pow(4);
        let domain_top = umax.div_ceil(w4).max(1) * w4;
        let mut prime = (domain_top / w4 + 1).max(a_count);
        while !is_prime(prime) {
            prime += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = rng.gen_range(1..prime);
        let beta = rng.gen_range(0..prime);
        let perm_seed = rng.gen();
        Ok(Self::from_params(WeightParams { w, a_count, alpha, beta, prime, perm_seed, umax, domain_top }))
    }

    pub fn from_params(params: WeightParams) -> Self {
        let w = params.w;
        WeightFn { w3: w.pow(3), w4: w.pow(4), params, perms: RwLock::new(HashMap::new()) }
    }

    pub fn params(&self) -> &WeightParams {
        &self.params
    }

    pub fn w(&self) -> u64 {
        self.params.w
    }

    pub fn w4(&self) -> u64 {
        self.w4
    }

    pub fn domain_top(&self) -> u64 {
        self.params.domain_top
    }

    /// The superchunk hash `f`.
    pub fn f(&self, xhigh: u64) -> u64 {
        let p = self.params.prime as u128;
        let v = (self.params.alpha as u128 * xhigh as u128 + self.params.beta as u128) % p;
        (v % self.params.a_count as u128) as u64
    }

    pub fn decompose(&self, x: u64) -> Result<KeyParts> {
        if x >= self.params.domain_top {
            return Err(Error::Domain(format!("key {x} outside [0, {})", self.params.domain_top)));
        }
        let w = self.params.w;
        let xlow = x % w;
        let xhighmid = x / w;
        let xmid = xhighmid % self.w3;
        let xhigh = xhighmid / self.w3;
        Ok(KeyParts { xlow, xmid, xhigh, xhighmid, xmidlow: xmid * w + xlow })
    }

    fn perm(&self, i: u64, m: u64) -> Arc<Perm> {
        if let Some(p) = self.perms.read().expect("perm cache").get(&(i, m)) {
            return p.clone();
        }
        let w = self.params.w as usize;
        let seed = splitmix(splitmix(self.params.perm_seed ^ splitmix(i)) ^ m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fwd: Vec<u16> = (0..w as u16).collect();
        fwd.shuffle(&mut rng);
        let mut inv = vec![0u16; w];
        for (pos, &v) in fwd.iter().enumerate() {
            inv[v as usize] = pos as u16;
        }
        let p = Arc::new(Perm { fwd, inv });
        self.perms.write().expect("perm cache").insert((i, m), p.clone());
        p
    }

    /// Entry `off` of array `A_i`, for `off < W^4`.
    pub fn array_weight(&self, i: u64, off: u64) -> u64 {
        let w = self.params.w;
        self.perm(i, off / w).fwd[(off % w) as usize] as u64
    }

    /// `h(x)`. Keys must lie below `domain_top`.
    pub fn weight(&self, x: u64) -> u64 {
        debug_assert!(x < self.params.domain_top, "key outside weight domain");
        let w = self.params.w;
        let xhighmid = x / w;
        let i = self.f(xhighmid / self.w3);
        self.perm(i, xhighmid % self.w3).fwd[(x % w) as usize] as u64
    }

    /// The unique `xlow` with `h(xhighmid * W + xlow) = hval`.
    pub fn recover_low(&self, xhighmid: u64, hval: u64) -> u64 {
        let i = self.f(xhighmid / self.w3);
        self.perm(i, xhighmid % self.w3).inv[hval as usize] as u64
    }

    /// Number of keys in `[a, b)` whose weight is at most `hmax`.
    pub fn count_valid(&self, a: u64, b: u64, hmax: u64) -> u64 {
        range_count(self.params.w, a, b, hmax, |x| self.weight(x))
    }

    /// Number of keys of each weight in `[a, b)`; the result has length `W`.
    pub fn weight_histogram(&self, a: u64, b: u64) -> Vec<u64> {
        range_histogram(self.params.w, a, b, |x| self.weight(x))
    }

    /// Offsets in `[lo, hi)` of `A_i ++ A_j` whose weight is at most `hmax`.
    pub fn profile_count(&self, t: &ProfileTuple, lo: u64, hi: u64, hmax: u64) -> u64 {
        range_count(self.params.w, lo, hi, hmax, |o| self.profile_weight(t, o))
    }

    /// Per-weight counts over offsets `[lo, hi)` of `A_i ++ A_j`.
    pub fn profile_histogram(&self, t: &ProfileTuple, lo: u64, hi: u64) -> Vec<u64> {
        range_histogram(self.params.w, lo, hi, |o| self.profile_weight(t, o))
    }

    /// The `(i, j, a', b')` description of the weights over `[a, b)`.
    pub fn profile_of(&self, a: u64, b: u64) -> Result<ProfileTuple> {
        if a >= b {
            return Err(Error::Precondition(format!("empty range [{a}, {b})")));
        }
        if b - a >= self.w4 {
            return Err(Error::Precondition(format!("range length {} is not below W^4", b - a)));
        }
        let sc = a / self.w4;
        let a_off = a % self.w4;
        Ok(ProfileTuple { i: self.f(sc), j: self.f(sc + 1), a_off, b_off: a_off + (b - a) })
    }

    /// Weight at offset `off` of the concatenation `A_i ++ A_j`.
    pub fn profile_weight(&self, t: &ProfileTuple, off: u64) -> u64 {
        if off < self.w4 {
            self.array_weight(t.i, off)
        } else {
            self.array_weight(t.j, off - self.w4)
        }
    }

    /// Number of memoised permutations, for instrumentation.
    pub fn cached_permutations(&self) -> usize {
        self.perms.read().expect("perm cache").len()
    }
}

/// Counts positions in `[a, b)` with weight at most `hmax`, scanning only the
/// partial subchunks at both ends. Every aligned run of `w` positions is a
/// permutation of `[w]` and contributes `hmax + 1`.
fn range_count(w: u64, a: u64, b: u64, hmax: u64, wt: impl Fn(u64) -> u64) -> u64 {
    if a >= b {
        return 0;
    }
    let hmax = hmax.min(w - 1);
    let first_full = a.div_ceil(w) * w;
    let last_full = (b / w) * w;
    if first_full >= last_full {
        return (a..b).filter(|&x| wt(x) <= hmax).count() as u64;
    }
    let head = (a..first_full).filter(|&x| wt(x) <= hmax).count() as u64;
    let tail = (last_full..b).filter(|&x| wt(x) <= hmax).count() as u64;
    head + tail + (last_full - first_full) / w * (hmax + 1)
}

fn range_histogram(w: u64, a: u64, b: u64, wt: impl Fn(u64) -> u64) -> Vec<u64> {
    let mut hist = vec![0u64; w as usize];
    if a >= b {
        return hist;
    }
    let first_full = a.div_ceil(w) * w;
    let last_full = (b / w) * w;
    if first_full >= last_full {
        for x in a..b {
            hist[wt(x) as usize] += 1;
        }
        return hist;
    }
    for x in (a..first_full).chain(last_full..b) {
        hist[wt(x) as usize] += 1;
    }
    let full = (last_full - first_full) / w;
    for h in hist.iter_mut() {
        *h += full;
    }
    hist
}
