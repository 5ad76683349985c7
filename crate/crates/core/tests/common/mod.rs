#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use tabtreap::weight::WeightFn;

/// Uniform sample of an `n`-set from `[lo, hi)` whose weights are pairwise
/// distinct and at least `t_fail`. Every weight class holds the same number
/// of keys when the range is aligned to `W`, so drawing keys one at a time
/// among unused classes makes every ordered draw equally likely.
pub fn non_failure_set(h: &WeightFn, n: usize, t_fail: u64, lo: u64, hi: u64, rng: &mut impl Rng) -> Vec<u64> {
    assert!(n as u64 <= h.w() - t_fail, "no non-failure set of size {n}");
    let mut used = HashSet::new();
    let mut keys = Vec::with_capacity(n);
    while keys.len() < n {
        let x = rng.gen_range(lo..hi);
        let wt = h.weight(x);
        if wt >= t_fail && used.insert(wt) {
            keys.push(x);
        }
    }
    keys.sort_unstable();
    keys
}

/// Calls `f` on every `k`-subset of `[lo, hi)` in lexicographic order.
pub fn for_each_subset(lo: u64, hi: u64, k: usize, f: &mut impl FnMut(&[u64])) {
    fn rec(start: u64, hi: u64, k: usize, cur: &mut Vec<u64>, f: &mut impl FnMut(&[u64])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        let need = (k - cur.len()) as u64;
        let mut x = start;
        while x + need <= hi {
            cur.push(x);
            rec(x + 1, hi, k, cur, f);
            cur.pop();
            x += 1;
        }
    }
    rec(lo, hi, k, &mut Vec::new(), f);
}
