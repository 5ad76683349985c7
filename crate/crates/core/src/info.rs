//! The information-model encoder.
//!
//! A key set is described as a sequence of symbols, each drawn from a
//! distribution that depends only on earlier symbols. The sum of
//! `log2(1 / D_i(X_i))` over the sequence is the information cost, and the
//! audit compares it with `log2 C(V, n)` at every recursion node.
//!
//! Non-uniform distributions come from a [`DistRegistry`], which maps a
//! [`DistIndex`] to a memoised [`Distribution`] through per-family
//! constructors.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::sync::{Arc, OnceLock, RwLock};

use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::numeric::{binom, binom_u64, cost_of_ratio, log2_cost, BigNat, BitCost, GeomTable, Rounding};
use crate::weight::{ProfileTuple, WeightFn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// Pivot weight given `(n, hmax)`; the last symbol is the unused `∅`.
    WeightTd,
    /// Pivot rank given `(n, pL, pR)`, where `p = 0` encodes `Ṽ = 0` and
    /// `p = t + 1` encodes the geometric value with exponent `t`.
    RankTd,
    /// Pivot offset and rank `(Δp, r)` given `(i, j, a', b', n, hmax)`, as the
    /// single symbol `Δp * n + r`.
    Small,
    /// Uniform over `[lo, hi)`; symbols are offsets from `lo`.
    UniformRange,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DistIndex {
    pub family: Family,
    pub params: Vec<u64>,
}

impl fmt::Display for DistIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{:?}", self.family, self.params)
    }
}

/// An exact probability `num / den`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prob {
    pub num: BigNat,
    pub den: BigNat,
}

impl Prob {
    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    /// `log2(1 / p)` with the requested rounding.
    pub fn cost(&self, dir: Rounding, frac: u32) -> Result<BitCost> {
        if self.num.is_zero() {
            return Err(Error::Precondition("cost of a zero-probability symbol".into()));
        }
        cost_of_ratio(&self.num, &self.den, dir, frac)
    }
}

/// A finite distribution over symbols `[0, domain_size())`, described by
/// integer masses over a common total.
pub trait Distribution: Send + Sync + fmt::Debug {
    fn index(&self) -> &DistIndex;
    fn domain_size(&self) -> u64;
    fn mass(&self, sym: u64) -> BigNat;
    fn total(&self) -> BigNat;

    fn prob(&self, sym: u64) -> Prob {
        Prob { num: self.mass(sym), den: self.total() }
    }

    /// Symbols with nonzero mass, in increasing order.
    fn support(&self) -> Vec<u64> {
        (0..self.domain_size()).filter(|&s| !self.mass(s).is_zero()).collect()
    }
}

#[derive(Debug)]
struct Tabulated {
    index: DistIndex,
    masses: Vec<BigNat>,
    total: BigNat,
}

impl Distribution for Tabulated {
    fn index(&self) -> &DistIndex {
        &self.index
    }
    fn domain_size(&self) -> u64 {
        self.masses.len() as u64
    }
    fn mass(&self, sym: u64) -> BigNat {
        self.masses.get(sym as usize).cloned().unwrap_or_default()
    }
    fn total(&self) -> BigNat {
        self.total.clone()
    }
}

/// `pmf(h) = n / (hmax+1) * (h / (hmax+1))^(n-1)` on `[0, hmax]`; the
/// remaining mass sits on the extra symbol `hmax + 1`.
pub fn dist_weight_td(n: u64, hmax: u64) -> Result<Arc<dyn Distribution>> {
    if n == 0 {
        return Err(Error::Precondition("WeightTd needs n >= 1".into()));
    }
    let total = BigNat::from(hmax + 1).pow(n as u32);
    let mut masses: Vec<BigNat> =
        (0..=hmax).map(|h| BigNat::from(n) * BigNat::from(h).pow((n - 1) as u32)).collect();
    let used: BigNat = masses.iter().sum();
    masses.push(&total - used);
    Ok(Arc::new(Tabulated {
        index: DistIndex { family: Family::WeightTd, params: vec![n, hmax] },
        masses,
        total,
    }))
}

/// `pmf(r) = C(ṼL, r) C(ṼR, n-1-r) / C(ṼL+ṼR, n-1)` for `r` in `[0, n)`.
pub fn dist_rank_td(n: u64, vl: &BigNat, vr: &BigNat, index: DistIndex) -> Result<Arc<dyn Distribution>> {
    if n == 0 {
        return Err(Error::Precondition("RankTd needs n >= 1".into()));
    }
    let sum = vl + vr;
    if sum < BigNat::from(n - 1) {
        return Err(Error::Precondition(format!("RankTd infeasible: {vl} + {vr} < {}", n - 1)));
    }
    let masses: Vec<BigNat> = (0..n).map(|r| binom(vl, r) * binom(vr, n - 1 - r)).collect();
    Ok(Arc::new(Tabulated { index, masses, total: binom(&sum, n - 1) }))
}

/// Uniform over `[lo, hi)`.
#[derive(Debug)]
pub struct DistUniform {
    index: DistIndex,
    size: u64,
}

impl DistUniform {
    pub fn new(lo: u64, hi: u64) -> Result<Self> {
        if hi <= lo {
            return Err(Error::Precondition(format!("empty uniform range [{lo}, {hi})")));
        }
        Ok(DistUniform { index: DistIndex { family: Family::UniformRange, params: vec![lo, hi] }, size: hi - lo })
    }
}

impl Distribution for DistUniform {
    fn index(&self) -> &DistIndex {
        &self.index
    }
    fn domain_size(&self) -> u64 {
        self.size
    }
    fn mass(&self, sym: u64) -> BigNat {
        if sym < self.size {
            BigNat::one()
        } else {
            BigNat::zero()
        }
    }
    fn total(&self) -> BigNat {
        BigNat::from(self.size)
    }
    fn support(&self) -> Vec<u64> {
        (0..self.size).collect()
    }
}

/// The exact distribution of `(Δp, r)` for a random key set with a unique
/// maximum weight over a short range, described by its weight profile.
#[derive(Debug)]
pub struct DistSmall {
    index: DistIndex,
    h: Arc<WeightFn>,
    t: ProfileTuple,
    n: u64,
    hmax: u64,
    total: OnceLock<BigNat>,
}

impl DistSmall {
    pub fn new(h: Arc<WeightFn>, t: ProfileTuple, n: u64, hmax: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("Small needs n >= 1".into()));
        }
        if t.b_off <= t.a_off {
            return Err(Error::Precondition("Small needs a nonempty range".into()));
        }
        let index = DistIndex { family: Family::Small, params: vec![t.i, t.j, t.a_off, t.b_off, n, hmax] };
        let d = DistSmall { index, h, t, n, hmax, total: OnceLock::new() };
        if d.total().is_zero() {
            return Err(Error::Precondition(format!("no valid pivot for n = {n} in {}", d.index)));
        }
        Ok(d)
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Keys in profile offsets `[lo, hi)` with weight strictly below `hp`.
    fn below(&self, lo: u64, hi: u64, hp: u64) -> u64 {
        if hp == 0 {
            0
        } else {
            self.h.profile_count(&self.t, lo, hi, hp - 1)
        }
    }

    /// `(V_L, V_R)` around the pivot at offset `dp`, or `None` if the pivot's
    /// weight exceeds `hmax`.
    pub fn split_counts(&self, dp: u64) -> Option<(u64, u64)> {
        let off = self.t.a_off + dp;
        let hp = self.h.profile_weight(&self.t, off);
        if hp > self.hmax {
            return None;
        }
        Some((self.below(self.t.a_off, off, hp), self.below(off + 1, self.t.b_off, hp)))
    }
}

impl Distribution for DistSmall {
    fn index(&self) -> &DistIndex {
        &self.index
    }

    fn domain_size(&self) -> u64 {
        (self.t.b_off - self.t.a_off) * self.n
    }

    fn mass(&self, sym: u64) -> BigNat {
        let (dp, r) = (sym / self.n, sym % self.n);
        if dp >= self.t.b_off - self.t.a_off {
            return BigNat::zero();
        }
        match self.split_counts(dp) {
            None => BigNat::zero(),
            Some((vl, vr)) => {
                if r > vl || self.n - 1 - r > vr {
                    return BigNat::zero();
                }
                binom_u64(vl, r) * binom_u64(vr, self.n - 1 - r)
            }
        }
    }

    /// `Σ_p C(V(a, b, h(p) - 1), n - 1)` over valid pivots, from the weight
    /// histogram of the range.
    fn total(&self) -> BigNat {
        self.total
            .get_or_init(|| {
                let hist = self.h.profile_histogram(&self.t, self.t.a_off, self.t.b_off);
                let mut below = 0u64;
                let mut total = BigNat::zero();
                for (hp, &c) in hist.iter().enumerate() {
                    if hp as u64 > self.hmax {
                        break;
                    }
                    if c > 0 {
                        total += binom_u64(below, self.n - 1) * BigNat::from(c);
                    }
                    below += c;
                }
                total
            })
            .clone()
    }
}

pub type Constructor = fn(&DistRegistry, &[u64]) -> Result<Arc<dyn Distribution>>;

/// Named constructors for every distribution family plus a memo of the
/// non-uniform instances actually used.
pub struct DistRegistry {
    h: Arc<WeightFn>,
    geom: Arc<GeomTable>,
    constructors: HashMap<Family, Constructor>,
    cache: RwLock<HashMap<DistIndex, Arc<dyn Distribution>>>,
    cap: usize,
}

impl fmt::Debug for DistRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistRegistry").field("instantiated", &self.instantiated()).finish()
    }
}

fn params_n<const K: usize>(family: Family, p: &[u64]) -> Result<[u64; K]> {
    p.try_into().map_err(|_| Error::Precondition(format!("{family:?} takes {K} parameters, got {}", p.len())))
}

fn ctor_weight_td(_: &DistRegistry, p: &[u64]) -> Result<Arc<dyn Distribution>> {
    let [n, hmax] = params_n(Family::WeightTd, p)?;
    dist_weight_td(n, hmax)
}

fn ctor_rank_td(reg: &DistRegistry, p: &[u64]) -> Result<Arc<dyn Distribution>> {
    let [n, pl, pr] = params_n(Family::RankTd, p)?;
    let index = DistIndex { family: Family::RankTd, params: p.to_vec() };
    dist_rank_td(n, &reg.geom_param_value(pl), &reg.geom_param_value(pr), index)
}

fn ctor_small(reg: &DistRegistry, p: &[u64]) -> Result<Arc<dyn Distribution>> {
    let [i, j, a_off, b_off, n, hmax] = params_n(Family::Small, p)?;
    Ok(Arc::new(DistSmall::new(reg.h.clone(), ProfileTuple { i, j, a_off, b_off }, n, hmax)?))
}

fn ctor_uniform(_: &DistRegistry, p: &[u64]) -> Result<Arc<dyn Distribution>> {
    let [lo, hi] = params_n(Family::UniformRange, p)?;
    Ok(Arc::new(DistUniform::new(lo, hi)?))
}

impl DistRegistry {
    pub fn new(h: Arc<WeightFn>, geom: Arc<GeomTable>) -> Self {
        let mut constructors: HashMap<Family, Constructor> = HashMap::new();
        constructors.insert(Family::WeightTd, ctor_weight_td);
        constructors.insert(Family::RankTd, ctor_rank_td);
        constructors.insert(Family::Small, ctor_small);
        constructors.insert(Family::UniformRange, ctor_uniform);
        DistRegistry { h, geom, constructors, cache: RwLock::new(HashMap::new()), cap: 1 << 22 }
    }

    /// Limits the number of memoised non-uniform instances.
    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    /// Replaces the constructor of one family.
    pub fn register(&mut self, family: Family, ctor: Constructor) {
        self.constructors.insert(family, ctor);
        self.cache.write().expect("registry lock").retain(|k, _| k.family != family);
    }

    pub fn weight_fn(&self) -> &Arc<WeightFn> {
        &self.h
    }

    pub fn geom(&self) -> &Arc<GeomTable> {
        &self.geom
    }

    /// Resolves an index; uniform instances are built fresh every time.
    pub fn get(&self, idx: &DistIndex) -> Result<Arc<dyn Distribution>> {
        let ctor = *self
            .constructors
            .get(&idx.family)
            .ok_or_else(|| Error::Config(format!("no constructor for {:?}", idx.family)))?;
        if idx.family == Family::UniformRange {
            return ctor(self, &idx.params);
        }
        if let Some(d) = self.cache.read().expect("registry lock").get(idx) {
            return Ok(d.clone());
        }
        let d = ctor(self, &idx.params)?;
        let mut cache = self.cache.write().expect("registry lock");
        if cache.len() >= self.cap && !cache.contains_key(idx) {
            return Err(Error::Precondition(format!("distribution registry cap {} exceeded", self.cap)));
        }
        Ok(cache.entry(idx.clone()).or_insert(d).clone())
    }

    /// Number of distinct non-uniform instances built so far.
    pub fn instantiated(&self) -> usize {
        self.cache.read().expect("registry lock").len()
    }

    pub fn instantiated_indices(&self) -> Vec<DistIndex> {
        let mut v: Vec<DistIndex> = self.cache.read().expect("registry lock").keys().cloned().collect();
        v.sort();
        v
    }

    /// The geometric parameter of `v`: 0 for `v = 0`, otherwise `t + 1`.
    pub fn geom_param(&self, v: &BigNat) -> u64 {
        if v.is_zero() {
            0
        } else {
            self.geom.round_up(v).t + 1
        }
    }

    pub fn geom_param_value(&self, p: u64) -> BigNat {
        if p == 0 {
            BigNat::zero()
        } else {
            self.geom.value_at(p - 1)
        }
    }

    pub fn weight_td_index(n: u64, hmax: u64) -> DistIndex {
        DistIndex { family: Family::WeightTd, params: vec![n, hmax] }
    }

    pub fn rank_td_index(&self, n: u64, vl: &BigNat, vr: &BigNat) -> DistIndex {
        DistIndex { family: Family::RankTd, params: vec![n, self.geom_param(vl), self.geom_param(vr)] }
    }

    pub fn small_index(t: &ProfileTuple, n: u64, hmax: u64) -> DistIndex {
        DistIndex { family: Family::Small, params: vec![t.i, t.j, t.a_off, t.b_off, n, hmax] }
    }

    pub fn uniform_index(lo: u64, hi: u64) -> DistIndex {
        DistIndex { family: Family::UniformRange, params: vec![lo, hi] }
    }
}

/// A recursion node: encode `n` keys from `[a, b)` with weight at most `hmax`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubproblemId {
    pub n: u64,
    pub a: u64,
    pub b: u64,
    pub hmax: u64,
}

impl SubproblemId {
    pub fn new(n: u64, a: u64, b: u64, hmax: u64) -> Self {
        SubproblemId { n, a, b, hmax }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Emission {
    pub symbol: u64,
    pub dist: DistIndex,
    /// `log2(1 / D(symbol))`, rounded up.
    pub cost: BitCost,
}

/// Per-node record of the audit.
#[derive(Clone, Debug)]
pub struct NodeAudit {
    pub sub: SubproblemId,
    pub depth: u32,
    pub large: bool,
    /// Information cost of the node's own emissions.
    pub own_cost: BitCost,
    /// Information cost of the whole subtree.
    pub cost: BitCost,
    /// `log2 C(V(a, b, hmax), n)`, rounded down.
    pub log2_n: BitCost,
    /// `cost - log2_n`.
    pub slack: BitCost,
    /// `log2 C(V(ã, b̃, hmax), n) - log2 C(V(a, b, hmax), n)`, large nodes only.
    pub rounding_loss: Option<BitCost>,
    /// `log2(1/RankTd(r)) - log2(1/Rank(r))` at the encoded rank, large
    /// nodes only. Signed: both pmfs sum to one, so some ranks gain.
    pub v_penalty: Option<BitCost>,
    /// `log2(C(ṼL+ṼR, n-1) / C(VL+VR, n-1))`, the upper bound on every
    /// rank's penalty.
    pub v_penalty_bound: Option<BitCost>,
    /// Expected penalty under the true rank pmf (a KL divergence, so >= 0
    /// up to fixed-point rounding).
    pub v_divergence: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub root: SubproblemId,
    pub nodes: Vec<NodeAudit>,
    pub total_cost: BitCost,
    pub log2_binom: BitCost,
    pub delta_slack: f64,
}

impl AuditReport {
    /// Nodes whose slack exceeds `n * delta_slack`.
    pub fn violations(&self) -> Vec<&NodeAudit> {
        let frac = self.total_cost.frac();
        let d = BitCost::from_f64(self.delta_slack, frac, Rounding::Down);
        self.nodes.iter().filter(|a| a.slack > d.scale(a.sub.n as i64)).collect()
    }

    /// Smallest per-key budget that every node in this report satisfies.
    pub fn min_feasible_delta(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|a| a.sub.n > 0)
            .map(|a| a.slack.to_f64() / a.sub.n as f64)
            .fold(0.0, f64::max)
    }

    pub fn worst_node(&self) -> Option<&NodeAudit> {
        self.nodes
            .iter()
            .filter(|a| a.sub.n > 0)
            .max_by(|x, y| (x.slack.to_f64() / x.sub.n as f64).total_cmp(&(y.slack.to_f64() / y.sub.n as f64)))
    }

    /// Counts of per-key slack in bins of `width` bits, keyed by bin floor.
    pub fn slack_histogram(&self, width: f64) -> BTreeMap<i64, usize> {
        let mut hist = BTreeMap::new();
        for a in self.nodes.iter().filter(|a| a.sub.n > 0) {
            let bin = (a.slack.to_f64() / a.sub.n as f64 / width).floor() as i64;
            *hist.entry(bin).or_insert(0) += 1;
        }
        hist
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.root.n);
        let _ = writeln!(s, "nodes = {}", self.nodes.len());
        let _ = writeln!(s, "total_cost = {}", self.total_cost);
        let _ = writeln!(s, "log2_binom = {}", self.log2_binom);
        let _ = writeln!(s, "delta_slack = {}", self.delta_slack);
        let _ = writeln!(s, "violations = {}", self.violations().len());
        let _ = writeln!(s, "min_feasible_delta = {:.6}", self.min_feasible_delta());
        if let Some(w) = self.worst_node() {
            let _ = writeln!(
                s,
                "worst_node = n:{} a:{} b:{} hmax:{} slack:{}",
                w.sub.n, w.sub.a, w.sub.b, w.sub.hmax, w.slack
            );
        }
        for (bin, c) in self.slack_histogram(0.1) {
            let _ = writeln!(s, "slack_hist[{:.1}] = {c}", bin as f64 * 0.1);
        }
        s
    }
}

/// Information-model encoder, decoder and auditor.
#[derive(Debug)]
pub struct InfoModel {
    h: Arc<WeightFn>,
    reg: Arc<DistRegistry>,
    t_fail: u64,
    frac: u32,
}

struct Node {
    sub: SubproblemId,
    depth: u32,
    large: bool,
    own_cost: BitCost,
    p: u64,
    r: u64,
}

impl InfoModel {
    pub fn new(reg: Arc<DistRegistry>, t_fail: u64, frac: u32) -> Self {
        InfoModel { h: reg.weight_fn().clone(), reg, t_fail, frac }
    }

    pub fn registry(&self) -> &Arc<DistRegistry> {
        &self.reg
    }

    pub fn weight_fn(&self) -> &Arc<WeightFn> {
        &self.h
    }

    /// Fails unless weights in `keys` are pairwise distinct and at least `T_fail`.
    pub fn check_no_failure(&self, keys: &[u64]) -> Result<()> {
        check_failure_predicate(&self.h, self.t_fail, keys)
    }

    fn is_large(&self, sub: &SubproblemId) -> bool {
        sub.b - sub.a >= self.h.w4()
    }

    fn rounded(&self, sub: &SubproblemId) -> (u64, u64) {
        let w = self.h.w();
        (sub.a / w * w, sub.b.div_ceil(w) * w)
    }

    fn below(&self, a: u64, b: u64, hp: u64) -> u64 {
        if hp == 0 || a >= b {
            0
        } else {
            self.h.count_valid(a, b, hp - 1)
        }
    }

    fn emit(&self, idx: DistIndex, symbol: u64, out: &mut Vec<Emission>) -> Result<BitCost> {
        let d = self.reg.get(&idx)?;
        let cost = d.prob(symbol).cost(Rounding::Up, self.frac)?;
        out.push(Emission { symbol, dist: idx, cost });
        Ok(cost)
    }

    /// Emission sequence for `keys` (sorted) under subproblem `sub`.
    pub fn encode_info(&self, keys: &[u64], sub: SubproblemId) -> Result<Vec<Emission>> {
        if keys.len() as u64 != sub.n {
            return Err(Error::Precondition(format!("{} keys for a subproblem of size {}", keys.len(), sub.n)));
        }
        if keys.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Precondition("keys must be strictly increasing".into()));
        }
        if keys.iter().any(|&k| k < sub.a || k >= sub.b || self.h.weight(k) > sub.hmax) {
            return Err(Error::Precondition("key outside the subproblem".into()));
        }
        self.check_no_failure(keys)?;
        let mut out = Vec::new();
        self.enc(keys, sub, &mut out)?;
        Ok(out)
    }

    fn enc(&self, keys: &[u64], sub: SubproblemId, out: &mut Vec<Emission>) -> Result<()> {
        let n = keys.len() as u64;
        if n == 0 {
            return Ok(());
        }
        let (pos, p) = keys
            .iter()
            .copied()
            .enumerate()
            .max_by_key(|&(_, k)| self.h.weight(k))
            .expect("nonempty");
        let hp = self.h.weight(p);
        let r = pos as u64;
        let child_h = hp.saturating_sub(1);
        if self.is_large(&sub) {
            let (at, bt) = self.rounded(&sub);
            let w = self.h.w();
            self.emit(DistRegistry::weight_td_index(n, sub.hmax), hp, out)?;
            self.emit(DistRegistry::uniform_index(at / w, bt / w), p / w - at / w, out)?;
            let vl = BigNat::from(self.below(at, p, hp));
            let vr = BigNat::from(self.below(p + 1, bt, hp));
            self.emit(self.reg.rank_td_index(n, &vl, &vr), r, out)?;
            self.enc(&keys[..pos], SubproblemId::new(r, at, p, child_h), out)?;
            self.enc(&keys[pos + 1..], SubproblemId::new(n - r - 1, p + 1, bt, child_h), out)
        } else {
            let t = self.h.profile_of(sub.a, sub.b)?;
            self.emit(DistRegistry::small_index(&t, n, sub.hmax), (p - sub.a) * n + r, out)?;
            self.enc(&keys[..pos], SubproblemId::new(r, sub.a, p, child_h), out)?;
            self.enc(&keys[pos + 1..], SubproblemId::new(n - r - 1, p + 1, sub.b, child_h), out)
        }
    }

    /// Inverse of [`InfoModel::encode_info`].
    pub fn decode_info(&self, emissions: &[Emission], sub: SubproblemId) -> Result<Vec<u64>> {
        let mut cursor = 0;
        let mut keys = Vec::with_capacity(sub.n as usize);
        self.walk(emissions, &mut cursor, sub, 0, &mut keys, &mut |_| {})?;
        if cursor != emissions.len() {
            return Err(Error::Corruption(format!("{} trailing emissions", emissions.len() - cursor)));
        }
        Ok(keys)
    }

    fn take(&self, emissions: &[Emission], cursor: &mut usize, idx: DistIndex) -> Result<(u64, BitCost)> {
        let e = emissions
            .get(*cursor)
            .ok_or_else(|| Error::Corruption("emission sequence ended early".into()))?;
        if e.dist != idx {
            return Err(Error::Corruption(format!("expected {idx}, found {}", e.dist)));
        }
        *cursor += 1;
        let d = self.reg.get(&idx)?;
        if e.symbol >= d.domain_size() || d.mass(e.symbol).is_zero() {
            return Err(Error::Corruption(format!("symbol {} has zero probability under {idx}", e.symbol)));
        }
        Ok((e.symbol, d.prob(e.symbol).cost(Rounding::Up, self.frac)?))
    }

    /// Decodes one subtree, appending its keys in order, and returns the
    /// subtree's information cost. `visit` sees every nonempty node after its
    /// children.
    fn walk(
        &self,
        emissions: &[Emission],
        cursor: &mut usize,
        sub: SubproblemId,
        depth: u32,
        keys: &mut Vec<u64>,
        visit: &mut dyn FnMut((&Node, BitCost)),
    ) -> Result<BitCost> {
        let n = sub.n;
        if n == 0 {
            return Ok(BitCost::zero(self.frac));
        }
        let large = self.is_large(&sub);
        let (p, r, own, left, right) = if large {
            let (at, bt) = self.rounded(&sub);
            let w = self.h.w();
            let (hp, c1) = self.take(emissions, cursor, DistRegistry::weight_td_index(n, sub.hmax))?;
            if hp > sub.hmax {
                return Err(Error::Corruption("decoded the unused weight symbol".into()));
            }
            let (dq, c2) = self.take(emissions, cursor, DistRegistry::uniform_index(at / w, bt / w))?;
            let q = at / w + dq;
            let p = q * w + self.h.recover_low(q, hp);
            let vl = BigNat::from(self.below(at, p, hp));
            let vr = BigNat::from(self.below(p + 1, bt, hp));
            let (r, c3) = self.take(emissions, cursor, self.reg.rank_td_index(n, &vl, &vr))?;
            let ch = hp.saturating_sub(1);
            (p, r, c1 + c2 + c3, SubproblemId::new(r, at, p, ch), SubproblemId::new(n - r - 1, p + 1, bt, ch))
        } else {
            let t = self.h.profile_of(sub.a, sub.b)?;
            let (s, c) = self.take(emissions, cursor, DistRegistry::small_index(&t, n, sub.hmax))?;
            let (p, r) = (sub.a + s / n, s % n);
            let hp = self.h.weight(p);
            let ch = hp.saturating_sub(1);
            (p, r, c, SubproblemId::new(r, sub.a, p, ch), SubproblemId::new(n - r - 1, p + 1, sub.b, ch))
        };
        let cl = self.walk(emissions, cursor, left, depth + 1, keys, visit)?;
        keys.push(p);
        let cr = self.walk(emissions, cursor, right, depth + 1, keys, visit)?;
        let total = own + cl + cr;
        visit((&Node { sub, depth, large, own_cost: own, p, r }, total));
        Ok(total)
    }

    fn log2_binom_down(&self, v: u64, n: u64) -> Result<BitCost> {
        let c = binom_u64(v, n);
        if c.is_zero() {
            return Err(Error::Precondition(format!("C({v}, {n}) is zero")));
        }
        log2_cost(&c, Rounding::Down, self.frac)
    }

    /// Exact `log2(x / y)` for `x >= y > 0`, zero when they are equal.
    fn log_ratio(&self, x: &BigNat, y: &BigNat) -> Result<BitCost> {
        if x == y {
            return Ok(BitCost::zero(self.frac));
        }
        cost_of_ratio(y, x, Rounding::Up, self.frac)
    }

    /// Per-node audit of an emission sequence against `log2 C(V, n)`.
    pub fn audit_subproblem(&self, sub: SubproblemId, emissions: &[Emission], delta_slack: f64) -> Result<AuditReport> {
        let mut cursor = 0;
        let mut keys = Vec::new();
        let mut raw: Vec<(SubproblemId, u32, bool, BitCost, BitCost, u64, u64)> = Vec::new();
        let total_cost = self.walk(emissions, &mut cursor, sub, 0, &mut keys, &mut |(node, cost)| {
            raw.push((node.sub, node.depth, node.large, node.own_cost, cost, node.p, node.r));
        })?;
        if cursor != emissions.len() {
            return Err(Error::Corruption("trailing emissions".into()));
        }
        let mut nodes = Vec::with_capacity(raw.len());
        for (s, depth, large, own_cost, cost, p, r) in raw {
            let v = self.h.count_valid(s.a, s.b, s.hmax);
            let log2_n = self.log2_binom_down(v, s.n)?;
            let (mut rounding_loss, mut v_penalty, mut v_penalty_bound, mut v_divergence) = (None, None, None, None);
            if large {
                let (at, bt) = self.rounded(&s);
                let vt = self.h.count_valid(at, bt, s.hmax);
                rounding_loss = Some(self.log_ratio(&binom_u64(vt, s.n), &binom_u64(v, s.n))?);
                let hp = self.h.weight(p);
                let vl = self.below(at, p, hp);
                let vr = self.below(p + 1, bt, hp);
                let idx = self.reg.rank_td_index(s.n, &BigNat::from(vl), &BigNat::from(vr));
                let td = self.reg.get(&idx)?;
                let true_den = binom_u64(vl + vr, s.n - 1);
                let penalty = |rank: u64| -> Result<Option<BitCost>> {
                    let true_num = binom_u64(vl, rank) * binom_u64(vr, s.n - 1 - rank);
                    if true_num.is_zero() {
                        return Ok(None);
                    }
                    // log2(1/td) - log2(1/truth) = log2((truth.num * td.den) / (truth.den * td.num))
                    let x = &true_num * td.total();
                    let y = &true_den * td.mass(rank);
                    Ok(Some(if x >= y { self.log_ratio(&x, &y)? } else { -self.log_ratio(&y, &x)? }))
                };
                v_penalty = penalty(r)?;
                v_penalty_bound = Some(self.log_ratio(&td.total(), &true_den)?);
                let mut kl = 0.0;
                for rank in 0..s.n {
                    if let Some(c) = penalty(rank)? {
                        let pr = binom_u64(vl, rank) * binom_u64(vr, s.n - 1 - rank);
                        kl += ratio_f64(&pr, &true_den) * c.to_f64();
                    }
                }
                v_divergence = Some(kl);
            }
            nodes.push(NodeAudit {
                sub: s,
                depth,
                large,
                own_cost,
                cost,
                log2_n,
                slack: cost - log2_n,
                rounding_loss,
                v_penalty,
                v_penalty_bound,
                v_divergence,
            });
        }
        let v = self.h.count_valid(sub.a, sub.b, sub.hmax);
        let log2_binom = if sub.n == 0 { BitCost::zero(self.frac) } else { self.log2_binom_down(v, sub.n)? };
        Ok(AuditReport { root: sub, nodes, total_cost, log2_binom, delta_slack })
    }

    /// The true pivot-weight distribution over `[a, b)`: symbol `h` has mass
    /// `#{p : h(p) = h} * C(V(a, b, h - 1), n - 1)`.
    pub fn dist_weight_exact(&self, a: u64, b: u64, n: u64, hmax: u64) -> Vec<Prob> {
        let hist = self.h.weight_histogram(a, b);
        let mut below = 0u64;
        let mut masses = Vec::new();
        for &c in hist.iter().take(hmax as usize + 1) {
            masses.push(BigNat::from(c) * binom_u64(below, n.saturating_sub(1)));
            below += c;
        }
        let total: BigNat = masses.iter().sum();
        masses.into_iter().map(|num| Prob { num, den: total.clone() }).collect()
    }
}

fn ratio_f64(num: &BigNat, den: &BigNat) -> f64 {
    let shift = den.bits().saturating_sub(60);
    let d = (den >> shift).to_f64().unwrap_or(f64::INFINITY);
    let n = (num >> shift).to_f64().unwrap_or(f64::INFINITY);
    n / d
}

/// The failure predicate: some two keys share a weight, or a key weighs less
/// than `t_fail`.
pub fn check_failure_predicate(h: &WeightFn, t_fail: u64, keys: &[u64]) -> Result<()> {
    let mut seen = vec![false; h.w() as usize];
    for &k in keys {
        let wt = h.weight(k);
        if wt < t_fail {
            return Err(Error::FailureDetected(format!("key {k} has weight {wt} below the floor {t_fail}")));
        }
        if std::mem::replace(&mut seen[wt as usize], true) {
            return Err(Error::FailureDetected(format!("weight {wt} appears twice")));
        }
    }
    Ok(())
}
