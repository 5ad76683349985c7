//! The compressed treap: one treap over `[0, U)` stored as a single spill pair.
//!
//! A subproblem `(n, a, b, hmax)` asks for `n` keys in `[a, b)` whose weights
//! are at most `hmax`. Large subproblems (`b - a >= W^4`) are encoded by the
//! three-encoder pipeline: the pivot rank with both child encodings, then the
//! pivot's high part under a uniform encoder, then the pivot weight. The
//! result is padded or squeezed to the node's declared `(M, K)`.
//!
//! Small subproblems are encoded exactly as one integer: the pivot and its rank
//! select a disjoint interval, and the two children occupy a mixed-radix pair
//! inside it. The integer lives below `C(V(a, b, hmax), n)`, which is then cut
//! into words and a spill at the small root.
//!
//! A set whose weights tie or fall below `T_fail` is stored in failure mode:
//! its lexicographic rank among all `n`-subsets when `n^2 >= w`, otherwise the
//! raw keys.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::sync::{Arc, RwLock};

use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};

use crate::coding::{EncKey, EncoderAudit, EncoderParams, EntropyEncoder, InputSize, SizeFn, UniformEncoder};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::info::{check_failure_predicate, DistIndex, DistRegistry, Family, SubproblemId};
use crate::numeric::{binom_u64, ceil_log2, log2_cost, pow2_scaled, BigNat, BitCost, GeomTable, Rounding};
use crate::vm::{from_words, to_words, SpillPair, VirtualMemory};
use crate::weight::WeightFn;
use crate::WORD_BITS;

const W: u64 = WORD_BITS as u64;
/// Words of the fixed header: mode, `n`, `U`.
pub const HEADER_WORDS: usize = 3;
const MEMO_CAP: usize = 1 << 20;
const ENCODER_CAP: usize = 1 << 16;

/// Numeric parameters shared by every treap built on one codec.
#[derive(Clone, Debug)]
pub struct TreapParams {
    pub nmax: u64,
    pub q: u64,
    pub delta_slack: BitCost,
    pub delta_mid: BitCost,
    pub delta_h: BitCost,
    pub t_fail: u64,
    pub frac: u32,
    pub c_spill: u32,
}

impl TreapParams {
    /// Parameters of `cfg`, sized for treaps of at most `nmax` keys.
    pub fn from_config(cfg: &Config, nmax: u64) -> Self {
        let t_fail = cfg.t_fail.unwrap_or_else(|| (cfg.weight_range / (16 * nmax.max(1))).max(1));
        TreapParams {
            nmax,
            q: cfg.q,
            delta_slack: cfg.delta_slack_cost(),
            delta_mid: cfg.delta_mid_cost(),
            delta_h: cfg.delta_h_cost(),
            t_fail,
            frac: cfg.frac_bits,
            c_spill: cfg.c_spill,
        }
    }
}

/// A memo table that is dropped wholesale when full; every value is a pure
/// function of its key.
struct Memo<K, V> {
    map: RwLock<HashMap<K, V>>,
}

impl<K: Hash + Eq, V: Clone> Memo<K, V> {
    fn new() -> Self {
        Memo { map: RwLock::new(HashMap::new()) }
    }

    fn get_or(&self, key: K, f: impl FnOnce() -> Result<V>) -> Result<V> {
        if let Some(v) = self.map.read().expect("memo lock").get(&key) {
            return Ok(v.clone());
        }
        let v = f()?;
        let mut map = self.map.write().expect("memo lock");
        if map.len() >= MEMO_CAP {
            map.clear();
        }
        map.insert(key, v.clone());
        Ok(v)
    }
}

#[derive(Clone, Debug)]
struct LargeSize {
    size: InputSize,
    log2_k: BitCost,
}

/// Size tables shared by the codec and the encoders' size functions.
struct Tables {
    h: Arc<WeightFn>,
    geom: Arc<GeomTable>,
    p: TreapParams,
    uniform: UniformEncoder,
    large: Memo<(u64, u64), LargeSize>,
    small: Memo<(u64, u64), InputSize>,
    wtd: Memo<(u64, u64, u64), BitCost>,
    hmax: Memo<(u64, u64, u64, u64), BitCost>,
}

impl Tables {
    fn wr(&self) -> u64 {
        self.h.w()
    }

    fn is_large(&self, sub: &SubproblemId) -> bool {
        sub.b - sub.a >= self.h.w4()
    }

    /// `(ã, b̃, ℓ)`: the range widened to whole subchunks.
    fn rounded(&self, sub: &SubproblemId) -> (u64, u64, u64) {
        let wr = self.wr();
        let at = sub.a - sub.a % wr;
        let bt = sub.b.div_ceil(wr) * wr;
        (at, bt, (bt - at) / wr)
    }

    /// `M` with `log2 C + extra - w M >= 2 log2 nmax` maximal, and the matching
    /// `K = ceil(C 2^extra / 2^(w M))`.
    fn large_size(&self, n: u64, ell: u64, hmax: u64) -> Result<LargeSize> {
        let t = self.geom.round_up(&BigNat::from(ell * (hmax + 1))).t;
        self.large.get_or((n, t), || {
            let frac = self.p.frac;
            let v = self.geom.value_at(t);
            let c = crate::numeric::binom(&v, n);
            if c.is_zero() {
                return Err(Error::Precondition(format!("no {n}-subset of {v} slots")));
            }
            let extra = self.p.delta_slack.scale(n as i64 - 1) + self.p.delta_mid;
            let two_log_nmax = log2_cost(&BigNat::from(self.p.nmax * self.p.nmax), Rounding::Up, frac)?;
            let top = log2_cost(&c, Rounding::Down, frac)? + extra - two_log_nmax;
            let m = if top.is_negative() { 0 } else { (top.floor_int() / W as i128) as usize };
            let e = extra - BitCost::from_int((m as u64 * W) as i64, frac);
            let k = pow2_scaled(&c, e, Rounding::Up);
            let log2_k = log2_cost(&k, Rounding::Down, frac)?;
            Ok(LargeSize { size: InputSize::new(m, k), log2_k })
        })
    }

    /// Sizes of a small root holding `n` of `v` valid keys.
    fn small_size(&self, n: u64, v: u64) -> InputSize {
        let nn = BigNat::from(self.p.nmax * self.p.nmax);
        self.small
            .get_or((n, v), || {
                let c = binom_u64(v, n);
                if c.is_zero() {
                    return Ok(InputSize::new(0, BigNat::one()));
                }
                let mut m = 0usize;
                while (&nn << ((m as u64 + 1) * W)) <= c {
                    m += 1;
                }
                let k = crate::vm::ceil_shift(&c, m as u64 * W);
                Ok(InputSize::new(m, k))
            })
            .expect("small sizes are infallible")
    }

    fn pair_size(&self, sub: &SubproblemId) -> Result<InputSize> {
        if sub.n == 0 {
            return Ok(InputSize::new(0, BigNat::one()));
        }
        if self.is_large(sub) {
            let (_, _, ell) = self.rounded(sub);
            return Ok(self.large_size(sub.n, ell, sub.hmax)?.size);
        }
        Ok(self.small_size(sub.n, self.h.count_valid(sub.a, sub.b, sub.hmax)))
    }

    /// `log2(1 / WeightTd(n, hmax)(hp))`, rounded up.
    fn wtd_cost(&self, n: u64, hmax: u64, hp: u64) -> Result<BitCost> {
        self.wtd.get_or((n, hmax, hp), || {
            let num = BigNat::from(n) * BigNat::from(hp).pow((n - 1) as u32);
            let den = BigNat::from(hmax + 1).pow(n as u32);
            crate::numeric::cost_of_ratio(&num, &den, Rounding::Up, self.p.frac)
        })
    }

    /// The bound handed to the uniform encoder of a large node whose pivot
    /// weighs `hp`; clamped at zero.
    fn h_max(&self, n: u64, ell: u64, hmax: u64, hp: u64) -> Result<BitCost> {
        self.hmax.get_or((n, ell, hmax, hp), || {
            let frac = self.p.frac;
            let ls = self.large_size(n, ell, hmax)?;
            let v = BitCost::from_int((ls.size.m as u64 * W) as i64, frac) + ls.log2_k
                - self.p.delta_mid
                - self.wtd_cost(n, hmax, hp)?
                - log2_cost(&BigNat::from(ell), Rounding::Up, frac)?
                + self.p.delta_h;
            Ok(if v.is_negative() { BitCost::zero(frac) } else { v.with_rounding(Rounding::Down) })
        })
    }

    fn rank_sub_counts(&self, at: u64, bt: u64, p: u64, hp: u64) -> (u64, u64) {
        if hp == 0 {
            return (0, 0);
        }
        (self.h.count_valid(at, p, hp - 1), self.h.count_valid(p + 1, bt, hp - 1))
    }
}

struct RankSizes(Arc<Tables>);

impl SizeFn for RankSizes {
    fn input_size(&self, key: &EncKey, sym: u64) -> Result<InputSize> {
        let [at, bt, p, hp]: [u64; 4] =
            key.ctx.as_slice().try_into().map_err(|_| Error::Precondition(format!("bad rank context {key}")))?;
        let n = key.dist.params[0];
        let hc = hp.saturating_sub(1);
        let l = self.0.pair_size(&SubproblemId::new(sym, at, p, hc))?;
        let r = self.0.pair_size(&SubproblemId::new(n - 1 - sym, p + 1, bt, hc))?;
        Ok(InputSize::new(l.m + r.m, l.k * r.k))
    }
}

struct WeightSizes(Arc<Tables>);

impl SizeFn for WeightSizes {
    fn input_size(&self, key: &EncKey, sym: u64) -> Result<InputSize> {
        let [n, hmax]: [u64; 2] = key.dist.params.as_slice().try_into().expect("WeightTd has two parameters");
        let ell = key.ctx[0];
        if sym > hmax {
            return Ok(InputSize::new(0, BigNat::one()));
        }
        let hm = self.0.h_max(n, ell, hmax, sym)?;
        self.0.uniform.output_size(0, ell, hm)
    }
}

/// A decoded pivot: key, weight and rank inside its subproblem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pivot {
    pub p: u64,
    pub hp: u64,
    pub r: u64,
}

/// How a node is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// Three-encoder pipeline; holds a spill pair.
    Large,
    /// Top of a small subtree; holds a spill pair cut from an exact integer.
    SmallRoot,
    /// Inside a small subtree; holds a bare integer.
    SmallInner,
}

#[derive(Clone, Debug)]
enum Enc {
    Pair(SpillPair),
    Z(BigNat),
}

#[derive(Clone, Debug)]
struct Node {
    sub: SubproblemId,
    enc: Enc,
}

struct Opened {
    kind: NodeKind,
    pivot: Pivot,
    left: Node,
    right: Node,
}

/// Space of one pair-holding node.
#[derive(Clone, Debug)]
pub struct NodeSpace {
    pub sub: SubproblemId,
    pub kind: NodeKind,
    pub depth: u32,
    pub m: usize,
    pub log2_k: f64,
    /// `log2 C(V, n)` of the node's own subproblem.
    pub log2_n: f64,
    /// `log2 C(Ṽ, n)` for large nodes.
    pub log2_n_tilde: Option<f64>,
    pub rank: Option<EncoderAudit>,
    pub weight: Option<EncoderAudit>,
    pub uniform_excess: Option<f64>,
    /// `H_max` minus the rank encoder's actual output bits, large nodes only.
    pub h_max_margin: Option<f64>,
}

impl NodeSpace {
    pub fn bits(&self) -> f64 {
        (self.m as u64 * W) as f64 + self.log2_k
    }
}

/// Shared tables and encoders for every treap over one weight function.
pub struct TreapCodec {
    tables: Arc<Tables>,
    reg: Arc<DistRegistry>,
    rank_enc: EntropyEncoder,
    weight_enc: EntropyEncoder,
}

impl fmt::Debug for TreapCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TreapCodec")
            .field("w", &self.tables.wr())
            .field("params", &self.tables.p)
            .field("rank_tables", &self.rank_enc.table_count())
            .field("weight_tables", &self.weight_enc.table_count())
            .finish()
    }
}

impl TreapCodec {
    pub fn new(h: Arc<WeightFn>, params: TreapParams) -> Result<Self> {
        if params.q < 2 {
            return Err(Error::Config("q must be at least 2".into()));
        }
        let geom = Arc::new(GeomTable::new(params.nmax));
        let reg = Arc::new(DistRegistry::new(h.clone(), geom.clone()));
        let kin_bits_max = params.c_spill as u64 * W;
        let frac = params.frac;
        let tables = Arc::new(Tables {
            h: h.clone(),
            geom,
            uniform: UniformEncoder::new(kin_bits_max, frac),
            p: params.clone(),
            large: Memo::new(),
            small: Memo::new(),
            wtd: Memo::new(),
            hmax: Memo::new(),
        });
        let enc_params = |supp_max| EncoderParams { q: params.q, kin_bits_max, supp_max, frac, cap: ENCODER_CAP };
        let rank_enc = EntropyEncoder::new(
            reg.clone(),
            Arc::new(RankSizes(tables.clone())),
            enc_params(params.nmax.max(h.w())),
        )?;
        let weight_enc =
            EntropyEncoder::new(reg.clone(), Arc::new(WeightSizes(tables.clone())), enc_params(h.w() + 1))?;
        Ok(TreapCodec { tables, reg, rank_enc, weight_enc })
    }

    /// A codec for a standalone treap over `cfg.universe` with `cfg.nmax`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let h = Arc::new(WeightFn::new(cfg.weight_range, cfg.a_count(), cfg.seed, cfg.universe)?);
        Self::new(h, TreapParams::from_config(cfg, cfg.nmax))
    }

    pub fn weight_fn(&self) -> &Arc<WeightFn> {
        &self.tables.h
    }

    pub fn params(&self) -> &TreapParams {
        &self.tables.p
    }

    pub fn registry(&self) -> &Arc<DistRegistry> {
        &self.reg
    }

    pub fn rank_encoder(&self) -> &EntropyEncoder {
        &self.rank_enc
    }

    pub fn weight_encoder(&self) -> &EntropyEncoder {
        &self.weight_enc
    }

    pub fn uniform_encoder(&self) -> &UniformEncoder {
        &self.tables.uniform
    }

    pub fn is_large(&self, sub: &SubproblemId) -> bool {
        self.tables.is_large(sub)
    }

    /// Declared `(M, K)` of a pair-holding node.
    pub fn pair_size(&self, sub: &SubproblemId) -> Result<InputSize> {
        self.tables.pair_size(sub)
    }

    /// `H_max` of a large node with pivot weight `hp`.
    pub fn h_max(&self, sub: &SubproblemId, hp: u64) -> Result<BitCost> {
        let (_, _, ell) = self.tables.rounded(sub);
        self.tables.h_max(sub.n, ell, sub.hmax, hp)
    }

    fn rank_key(&self, n: u64, at: u64, bt: u64, p: u64, hp: u64) -> EncKey {
        let (vl, vr) = self.tables.rank_sub_counts(at, bt, p, hp);
        let dist = self.reg.rank_td_index(n, &BigNat::from(vl), &BigNat::from(vr));
        EncKey::with_ctx(dist, vec![at, bt, p, hp])
    }

    fn weight_key(n: u64, hmax: u64, ell: u64) -> EncKey {
        EncKey::with_ctx(DistIndex { family: Family::WeightTd, params: vec![n, hmax] }, vec![ell])
    }

    /// The unique heaviest key of `keys`, with its index.
    fn pivot_of(&self, keys: &[u64]) -> Result<(usize, u64)> {
        let h = &self.tables.h;
        let mut best: Option<(usize, u64)> = None;
        let mut tie = false;
        for (i, &k) in keys.iter().enumerate() {
            let wt = h.weight(k);
            match best {
                Some((_, bw)) if wt == bw => tie = true,
                Some((_, bw)) if wt < bw => {}
                _ => {
                    best = Some((i, wt));
                    tie = false;
                }
            }
        }
        let best = best.ok_or_else(|| Error::Precondition("pivot of an empty set".into()))?;
        if tie {
            return Err(Error::FailureDetected(format!("maximum weight {} is not unique", best.1)));
        }
        Ok(best)
    }

    fn check_keys(&self, sub: &SubproblemId, keys: &[u64]) -> Result<()> {
        if keys.len() as u64 != sub.n {
            return Err(Error::Precondition(format!("{} keys for a subproblem of {}", keys.len(), sub.n)));
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition("keys must be strictly increasing".into()));
        }
        if let (Some(&lo), Some(&hi)) = (keys.first(), keys.last()) {
            if lo < sub.a || hi >= sub.b {
                return Err(Error::Domain(format!("keys outside [{}, {})", sub.a, sub.b)));
            }
        }
        Ok(())
    }

    // ---- pair-level coding ----

    /// Encodes a pair-holding node from its sorted keys.
    pub fn encode_pair(&self, sub: &SubproblemId, keys: &[u64]) -> Result<SpillPair> {
        self.check_keys(sub, keys)?;
        self.encode_pair_unchecked(sub, keys)
    }

    fn encode_pair_unchecked(&self, sub: &SubproblemId, keys: &[u64]) -> Result<SpillPair> {
        if sub.n == 0 {
            return Ok(SpillPair::empty());
        }
        if !self.tables.is_large(sub) {
            let z = self.small_encode(sub, keys)?;
            return self.z_to_pair(sub, &z);
        }
        let (i, hp) = self.pivot_of(keys)?;
        if hp > sub.hmax {
            return Err(Error::Domain(format!("weight {hp} above hmax {}", sub.hmax)));
        }
        let pivot = Pivot { p: keys[i], hp, r: i as u64 };
        let (ls, rs) = self.child_subs(NodeKind::Large, sub, &pivot);
        let left = self.encode_pair_unchecked(&ls, &keys[..i])?;
        let right = self.encode_pair_unchecked(&rs, &keys[i + 1..])?;
        self.close_large(sub, &pivot, &left, &right)
    }

    /// Decodes every key below a pair-holding node.
    pub fn decode_pair(&self, sub: &SubproblemId, pair: &SpillPair) -> Result<Vec<u64>> {
        let mut out = Vec::with_capacity(sub.n as usize);
        self.collect(&Node { sub: *sub, enc: Enc::Pair(pair.clone()) }, &mut out)?;
        Ok(out)
    }

    fn child_subs(&self, kind: NodeKind, sub: &SubproblemId, pv: &Pivot) -> (SubproblemId, SubproblemId) {
        let hc = pv.hp.saturating_sub(1);
        let (a, b) = if kind == NodeKind::Large {
            let (at, bt, _) = self.tables.rounded(sub);
            (at, bt)
        } else {
            (sub.a, sub.b)
        };
        (SubproblemId::new(pv.r, a, pv.p, hc), SubproblemId::new(sub.n - 1 - pv.r, pv.p + 1, b, hc))
    }

    /// Runs the rank, uniform and weight encoders and fits the result to the
    /// node's declared sizes.
    fn close_large(&self, sub: &SubproblemId, pv: &Pivot, left: &SpillPair, right: &SpillPair) -> Result<SpillPair> {
        let t = &self.tables;
        let wr = t.wr();
        let (at, bt, ell) = t.rounded(sub);
        let mut words = left.vm.words().to_vec();
        words.extend_from_slice(right.vm.words());
        let cat = SpillPair {
            vm: VirtualMemory::from_words(words),
            k: &left.k * &right.kmax + &right.k,
            kmax: &left.kmax * &right.kmax,
        };
        let rkey = self.rank_key(sub.n, at, bt, pv.p, pv.hp);
        let rank_out = self.rank_enc.encode(&rkey, pv.r, &cat)?;
        let hm = t.h_max(sub.n, ell, sub.hmax, pv.hp)?;
        let piv = t.uniform.encode(at / wr, bt / wr, hm, pv.p / wr, &rank_out)?;
        let wout = self.weight_enc.encode(&Self::weight_key(sub.n, sub.hmax, ell), pv.hp, &piv)?;
        let size = t.large_size(sub.n, ell, sub.hmax)?.size;
        adjust(wout, size.m, &size.k)
    }

    fn open_large(&self, sub: &SubproblemId, pair: &SpillPair) -> Result<Opened> {
        let t = &self.tables;
        let wr = t.wr();
        let (at, bt, ell) = t.rounded(sub);
        let size = t.large_size(sub.n, ell, sub.hmax)?.size;
        if pair.vm.len() != size.m || pair.kmax != size.k {
            return Err(Error::Corruption(format!("large node sizes do not match ({}, {}, {})", sub.n, sub.a, sub.b)));
        }
        let wkey = Self::weight_key(sub.n, sub.hmax, ell);
        let wsize = self.weight_enc.output_size(&wkey)?;
        let wout = unadjust(pair, &wsize)?;
        let (hp, piv) = self.weight_enc.decode(&wkey, &wout)?;
        if hp > sub.hmax || (hp == 0 && sub.n > 1) {
            return Err(Error::Corruption(format!("impossible pivot weight {hp}")));
        }
        let hm = t.h_max(sub.n, ell, sub.hmax, hp)?;
        let phm = t.uniform.read_symbol(at / wr, bt / wr, hm, &piv)?;
        let p = phm * wr + t.h.recover_low(phm, hp);
        if p < sub.a || p >= sub.b {
            return Err(Error::Corruption(format!("pivot {p} outside [{}, {})", sub.a, sub.b)));
        }
        let rkey = self.rank_key(sub.n, at, bt, p, hp);
        let rsize = self.rank_enc.output_size(&rkey)?;
        let (_, rank_out) = t.uniform.decode(at / wr, bt / wr, hm, &piv, |_| Ok(rsize))?;
        let (r, cat) = self.rank_enc.decode(&rkey, &rank_out)?;
        let pivot = Pivot { p, hp, r };
        let (ls, rs) = self.child_subs(NodeKind::Large, sub, &pivot);
        let lsize = t.pair_size(&ls)?;
        let rsize = t.pair_size(&rs)?;
        let words = cat.vm.words();
        if words.len() != lsize.m + rsize.m {
            return Err(Error::Corruption("child memory sizes disagree".into()));
        }
        let (kl, kr) = cat.k.div_rem(&rsize.k);
        let left = SpillPair::new(VirtualMemory::from_words(words[..lsize.m].to_vec()), kl, lsize.k)
            .map_err(|e| Error::Corruption(e.to_string()))?;
        let right = SpillPair { vm: VirtualMemory::from_words(words[lsize.m..].to_vec()), k: kr, kmax: rsize.k };
        Ok(Opened {
            kind: NodeKind::Large,
            pivot,
            left: Node { sub: ls, enc: Enc::Pair(left) },
            right: Node { sub: rs, enc: Enc::Pair(right) },
        })
    }

    // ---- small subtrees ----

    /// `C(below_h, n - 1)` for `h` in `[0, hmax]`, with the range histogram.
    fn small_tables(&self, sub: &SubproblemId) -> (Vec<u64>, Vec<BigNat>) {
        let hist = self.tables.h.weight_histogram(sub.a, sub.b);
        let mut below = 0u64;
        let mut c = Vec::with_capacity(sub.hmax as usize + 1);
        for &cnt in hist.iter().take(sub.hmax as usize + 1) {
            c.push(binom_u64(below, sub.n - 1));
            below += cnt;
        }
        (hist, c)
    }

    fn small_offset(&self, a: u64, p: u64, c: &[BigNat]) -> BigNat {
        let hist = self.tables.h.weight_histogram(a, p);
        let mut off = BigNat::zero();
        for (h, ch) in c.iter().enumerate() {
            if hist[h] > 0 && !ch.is_zero() {
                off += ch * BigNat::from(hist[h]);
            }
        }
        off
    }

    /// `(VL, VR)` for a small node with pivot `p` of weight `hp`.
    fn small_split_counts(&self, sub: &SubproblemId, hist_ab: &[u64], p: u64, hp: u64) -> (u64, u64) {
        let hist_ap = self.tables.h.weight_histogram(sub.a, p);
        let vl: u64 = hist_ap[..hp as usize].iter().sum();
        let below: u64 = hist_ab[..hp as usize].iter().sum();
        (vl, below - vl)
    }

    /// Number of distinct codes of a small subproblem; at most `C(V, n)`.
    pub fn small_total(&self, sub: &SubproblemId) -> BigNat {
        if sub.n == 0 {
            return BigNat::one();
        }
        let (_, c) = self.small_tables(sub);
        self.small_offset(sub.a, sub.b, &c)
    }

    fn small_join(&self, sub: &SubproblemId, pv: &Pivot, zl: &BigNat, zr: &BigNat) -> BigNat {
        let (hist, c) = self.small_tables(sub);
        let mut z = self.small_offset(sub.a, pv.p, &c);
        let (vl, vr) = self.small_split_counts(sub, &hist, pv.p, pv.hp);
        let n1 = sub.n - 1;
        for r in 0..pv.r {
            z += binom_u64(vl, r) * binom_u64(vr, n1 - r);
        }
        z + zl * binom_u64(vr, n1 - pv.r) + zr
    }

    /// The exact code of a small subproblem.
    pub fn small_encode(&self, sub: &SubproblemId, keys: &[u64]) -> Result<BigNat> {
        if sub.n == 0 {
            return Ok(BigNat::zero());
        }
        let (i, hp) = self.pivot_of(keys)?;
        if hp > sub.hmax {
            return Err(Error::Domain(format!("weight {hp} above hmax {}", sub.hmax)));
        }
        let pv = Pivot { p: keys[i], hp, r: i as u64 };
        let (ls, rs) = self.child_subs(NodeKind::SmallInner, sub, &pv);
        let zl = self.small_encode(&ls, &keys[..i])?;
        let zr = self.small_encode(&rs, &keys[i + 1..])?;
        Ok(self.small_join(sub, &pv, &zl, &zr))
    }

    fn small_open(&self, sub: &SubproblemId, z: &BigNat, kind: NodeKind) -> Result<Opened> {
        let (hist, c) = self.small_tables(sub);
        if *z >= self.small_offset(sub.a, sub.b, &c) {
            return Err(Error::Corruption(format!("small code out of range for ({}, {}, {})", sub.n, sub.a, sub.b)));
        }
        // Smallest p' in (a, b] with off(p') > z; the pivot is p' - 1.
        let (mut lo, mut hi) = (sub.a + 1, sub.b);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.small_offset(sub.a, mid, &c) > *z {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let p = lo - 1;
        let hp = self.tables.h.weight(p);
        let mut rem = z - self.small_offset(sub.a, p, &c);
        let (vl, vr) = self.small_split_counts(sub, &hist, p, hp);
        let n1 = sub.n - 1;
        let mut r = 0;
        loop {
            if r > n1 {
                return Err(Error::Corruption("small rank out of range".into()));
            }
            let t = binom_u64(vl, r) * binom_u64(vr, n1 - r);
            if rem < t {
                break;
            }
            rem -= t;
            r += 1;
        }
        let (zl, zr) = rem.div_rem(&binom_u64(vr, n1 - r));
        let pivot = Pivot { p, hp, r };
        let (ls, rs) = self.child_subs(NodeKind::SmallInner, sub, &pivot);
        Ok(Opened { kind, pivot, left: Node { sub: ls, enc: Enc::Z(zl) }, right: Node { sub: rs, enc: Enc::Z(zr) } })
    }

    fn z_to_pair(&self, sub: &SubproblemId, z: &BigNat) -> Result<SpillPair> {
        let size = self.tables.pair_size(sub)?;
        let bits = size.m as u64 * W;
        SpillPair::new(VirtualMemory::from_words(to_words(z, bits)), z >> bits, size.k)
    }

    fn pair_to_z(&self, sub: &SubproblemId, pair: &SpillPair) -> Result<BigNat> {
        let size = self.tables.pair_size(sub)?;
        if pair.vm.len() != size.m || pair.kmax != size.k || pair.k >= pair.kmax {
            return Err(Error::Corruption(format!("small root sizes do not match ({}, {}, {})", sub.n, sub.a, sub.b)));
        }
        Ok((&pair.k << (size.m as u64 * W)) + from_words(pair.vm.words()))
    }

    // ---- generic node traversal ----

    fn open(&self, node: &Node) -> Result<Option<Opened>> {
        if node.sub.n == 0 {
            return Ok(None);
        }
        match &node.enc {
            Enc::Pair(pair) if self.tables.is_large(&node.sub) => self.open_large(&node.sub, pair).map(Some),
            Enc::Pair(pair) => {
                let z = self.pair_to_z(&node.sub, pair)?;
                self.small_open(&node.sub, &z, NodeKind::SmallRoot).map(Some)
            }
            Enc::Z(z) => self.small_open(&node.sub, z, NodeKind::SmallInner).map(Some),
        }
    }

    fn collect(&self, node: &Node, out: &mut Vec<u64>) -> Result<()> {
        if let Some(o) = self.open(node)? {
            self.collect(&o.left, out)?;
            out.push(o.pivot.p);
            self.collect(&o.right, out)?;
        }
        Ok(())
    }

    fn encode_like(&self, sub: &SubproblemId, keys: &[u64], pair: bool) -> Result<Enc> {
        if pair {
            Ok(Enc::Pair(self.encode_pair_unchecked(sub, keys)?))
        } else {
            Ok(Enc::Z(self.small_encode(sub, keys)?))
        }
    }

    fn join(&self, kind: NodeKind, sub: &SubproblemId, pv: &Pivot, left: &Enc, right: &Enc) -> Result<Enc> {
        match (kind, left, right) {
            (NodeKind::Large, Enc::Pair(l), Enc::Pair(r)) => Ok(Enc::Pair(self.close_large(sub, pv, l, r)?)),
            (NodeKind::SmallRoot, Enc::Z(l), Enc::Z(r)) => {
                Ok(Enc::Pair(self.z_to_pair(sub, &self.small_join(sub, pv, l, r))?))
            }
            (NodeKind::SmallInner, Enc::Z(l), Enc::Z(r)) => Ok(Enc::Z(self.small_join(sub, pv, l, r))),
            _ => Err(Error::Precondition("child encodings do not match the node kind".into())),
        }
    }

    /// Space and encoder audits of every pair-holding node under `pair`.
    pub fn node_spaces(&self, sub: &SubproblemId, pair: &SpillPair) -> Result<Vec<NodeSpace>> {
        let mut out = Vec::new();
        self.node_spaces_rec(&Node { sub: *sub, enc: Enc::Pair(pair.clone()) }, 0, &mut out)?;
        Ok(out)
    }

    fn node_spaces_rec(&self, node: &Node, depth: u32, out: &mut Vec<NodeSpace>) -> Result<()> {
        let Enc::Pair(pair) = &node.enc else { return Ok(()) };
        let sub = node.sub;
        if sub.n == 0 {
            return Ok(());
        }
        let frac = self.tables.p.frac;
        let v = self.tables.h.count_valid(sub.a, sub.b, sub.hmax);
        let log2_n = log2_cost(&binom_u64(v, sub.n), Rounding::Down, frac)?.to_f64();
        let log2_k = log2_cost(&pair.kmax, Rounding::Up, frac)?.to_f64();
        let mut ns = NodeSpace {
            sub,
            kind: NodeKind::SmallRoot,
            depth,
            m: pair.vm.len(),
            log2_k,
            log2_n,
            log2_n_tilde: None,
            rank: None,
            weight: None,
            uniform_excess: None,
            h_max_margin: None,
        };
        let o = self.open(node)?.expect("nonempty node");
        if o.kind == NodeKind::Large {
            let t = &self.tables;
            let wr = t.wr();
            let (at, bt, ell) = t.rounded(&sub);
            let vt = t.geom.round_up(&BigNat::from(ell * (sub.hmax + 1))).value;
            ns.kind = NodeKind::Large;
            ns.log2_n_tilde = Some(log2_cost(&crate::numeric::binom(&vt, sub.n), Rounding::Down, frac)?.to_f64());
            let rkey = self.rank_key(sub.n, at, bt, o.pivot.p, o.pivot.hp);
            let rsize = self.rank_enc.output_size(&rkey)?;
            let hm = t.h_max(sub.n, ell, sub.hmax, o.pivot.hp)?;
            let rbits = (rsize.m as u64 * W) as f64 + log2_cost(&rsize.k, Rounding::Up, frac)?.to_f64();
            ns.h_max_margin = Some(hm.to_f64() - rbits);
            ns.rank = Some(self.rank_enc.audit(&rkey)?);
            ns.weight = Some(self.weight_enc.audit(&Self::weight_key(sub.n, sub.hmax, ell))?);
            ns.uniform_excess = Some(t.uniform.excess(at / wr, bt / wr, hm)?.to_f64());
            out.push(ns);
            self.node_spaces_rec(&o.left, depth + 1, out)?;
            self.node_spaces_rec(&o.right, depth + 1, out)?;
        } else {
            out.push(ns);
        }
        Ok(())
    }
}

/// Fits an encoder output of `(M_w, K_w)` into `(m, K)` words and spill.
fn adjust(out: SpillPair, m: usize, k: &BigNat) -> Result<SpillPair> {
    let mw = out.vm.len();
    if (&out.kmax << (mw as u64 * W)) > (k << (m as u64 * W)) {
        return Err(Error::CapacityViolation(format!(
            "encoder output of {:.4} bits exceeds the node budget of {:.4} bits",
            crate::vm::universe_bits(&out.kmax) + (mw as u64 * W) as f64,
            crate::vm::universe_bits(k) + (m as u64 * W) as f64
        )));
    }
    let mut words = out.vm.into_words();
    if m >= mw {
        let bits = (m - mw) as u64 * W;
        words.extend(to_words(&out.k, bits));
        SpillPair::new(VirtualMemory::from_words(words), &out.k >> bits, k.clone())
    } else {
        let hi = from_words(&words[m..]);
        words.truncate(m);
        SpillPair::new(VirtualMemory::from_words(words), hi * &out.kmax + &out.k, k.clone())
    }
}

fn unadjust(pair: &SpillPair, inner: &InputSize) -> Result<SpillPair> {
    let m = pair.vm.len();
    let mw = inner.m;
    let mut words = pair.vm.words().to_vec();
    let k = if m >= mw {
        let bits = (m - mw) as u64 * W;
        let low = from_words(&words[mw..]);
        words.truncate(mw);
        (&pair.k << bits) + low
    } else {
        let (hi, k) = pair.k.div_rem(&inner.k);
        let bits = (mw - m) as u64 * W;
        if hi.bits() > bits {
            return Err(Error::Corruption("size adjustment overflow".into()));
        }
        words.extend(to_words(&hi, bits));
        k
    };
    SpillPair::new(VirtualMemory::from_words(words), k, inner.k.clone()).map_err(|e| Error::Corruption(e.to_string()))
}

// ---- failure mode ----

/// Whether failure mode stores the lexicographic rank (`n^2 >= w`) rather than raw keys.
pub fn failure_uses_rank(n: u64) -> bool {
    n.saturating_mul(n) >= W
}

/// `ceil(log2 C(u, n))`, the size of a lexicographic rank.
pub fn lex_bits(u: u64, n: u64) -> u64 {
    ceil_log2(&binom_u64(u, n))
}

/// Bits of the failure-mode payload for `n` keys from `[0, u)`.
pub fn failure_bits(u: u64, n: u64) -> u64 {
    if n == 0 {
        0
    } else if failure_uses_rank(n) {
        lex_bits(u, n)
    } else {
        n * ceil_log2(&BigNat::from(u)).max(1)
    }
}

/// Lexicographic rank of a sorted `n`-subset of `[0, u)` among all of them.
pub fn lex_rank(keys: &[u64], u: u64) -> Result<BigNat> {
    if keys.windows(2).any(|w| w[0] >= w[1]) || keys.last().is_some_and(|&x| x >= u) {
        return Err(Error::Precondition("lex_rank needs strictly increasing keys below u".into()));
    }
    let mut k = keys.len() as u64;
    let mut m = u;
    let mut base = 0u64;
    let mut c = binom_u64(m, k);
    let mut z = BigNat::zero();
    for &x in keys {
        let d = x - base;
        let after = binom_u64(m - d, k);
        z += &c - &after;
        // C(m - d - 1, k - 1) = C(m - d, k) * k / (m - d).
        c = after * BigNat::from(k) / BigNat::from(m - d);
        m = m - d - 1;
        k -= 1;
        base = x + 1;
    }
    Ok(z)
}

fn ln_binom(m: u64, k: u64) -> f64 {
    (0..k).map(|i| ((m - i) as f64 / (k - i) as f64).ln()).sum()
}

fn ln_big(x: &BigNat) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64().unwrap_or(u64::MAX) as f64).ln();
    }
    let top = (x >> (bits - 64)).to_u64().unwrap_or(u64::MAX) as f64;
    top.ln() + (bits - 64) as f64 * std::f64::consts::LN_2
}

/// Inverse of [`lex_rank`].
pub fn lex_unrank(z: &BigNat, u: u64, n: u64) -> Result<Vec<u64>> {
    let mut k = n;
    let mut m = u;
    let mut base = 0u64;
    let mut c = binom_u64(m, k);
    if *z >= c {
        return Err(Error::Corruption(format!("rank {z} not below C({u}, {n})")));
    }
    let mut rem = z.clone();
    let mut keys = Vec::with_capacity(n as usize);
    while k > 0 {
        // Largest d in [0, m - k] with C(m - d, k) >= c - rem.
        let target = &c - &rem;
        let ln_t = ln_big(&target);
        let (mut lo, mut hi) = (0u64, m - k);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if ln_binom(m - mid, k) >= ln_t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let mut d = lo;
        let mut cd = binom_u64(m - d, k);
        while cd < target {
            // C(j + 1, k) = C(j, k) (j + 1) / (j + 1 - k) with j = m - d.
            let j = m - d;
            cd = cd * BigNat::from(j + 1) / BigNat::from(j + 1 - k);
            d -= 1;
        }
        while d < m - k {
            let j = m - d;
            let next = &cd * BigNat::from(j - k) / BigNat::from(j);
            if next < target {
                break;
            }
            cd = next;
            d += 1;
        }
        rem -= &c - &cd;
        keys.push(base + d);
        c = cd * BigNat::from(k) / BigNat::from(m - d);
        m = m - d - 1;
        k -= 1;
        base += d + 1;
    }
    Ok(keys)
}

fn failure_encode(keys: &[u64], u: u64) -> Result<Vec<u64>> {
    let n = keys.len() as u64;
    let bits = failure_bits(u, n);
    if failure_uses_rank(n) {
        return Ok(to_words(&lex_rank(keys, u)?, bits));
    }
    let per = ceil_log2(&BigNat::from(u)).max(1);
    let mut z = BigNat::zero();
    for &x in keys.iter().rev() {
        z = (z << per) + BigNat::from(x);
    }
    Ok(to_words(&z, bits))
}

fn failure_decode(words: &[u64], u: u64, n: u64) -> Result<Vec<u64>> {
    let bits = failure_bits(u, n);
    if words.len() as u64 != bits.div_ceil(W) {
        return Err(Error::Corruption("failure payload has the wrong length".into()));
    }
    let z = from_words(words);
    if failure_uses_rank(n) {
        return lex_unrank(&z, u, n);
    }
    let per = ceil_log2(&BigNat::from(u)).max(1);
    let mask = (BigNat::one() << per) - 1u32;
    let keys: Vec<u64> =
        (0..n).map(|i| ((&z >> (i * per)) & &mask).to_u64().expect("key fits in a word")).collect();
    if keys.windows(2).any(|w| w[0] >= w[1]) || keys.last().is_some_and(|&x| x >= u) {
        return Err(Error::Corruption("failure payload keys are not a sorted set".into()));
    }
    Ok(keys)
}

// ---- the treap ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Normal,
    Failure,
}

/// Per-operation instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpTrace {
    /// Nodes opened on the search path.
    pub visited: usize,
    /// Root-memory words decoded by a query.
    pub words_read: usize,
    /// Size of the subtree that was rebuilt from keys.
    pub rebuilt: u64,
    /// Words of the root memory that changed.
    pub words_changed: usize,
    /// The operation switched between normal and failure mode.
    pub mode_flip: bool,
}

/// Where a word of a node's virtual memory is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordLocation {
    /// A physical word of the root memory.
    Root(usize),
    /// Folded into the spill of the ancestor at this depth.
    Spill { depth: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VmRead {
    pub value: u64,
    pub location: WordLocation,
    /// Address translations performed on the way up.
    pub hops: usize,
}

/// Space accounting of one treap.
#[derive(Clone, Debug)]
pub struct SpaceAccount {
    pub n: u64,
    pub universe: u64,
    pub mode: Mode,
    pub m_words: usize,
    pub log2_k: f64,
    /// `w M + log2 K` in normal mode, the payload size in failure mode.
    pub payload_bits: f64,
    pub header_bits: u64,
    /// Physical bits: header, root words and the spill in whole bits.
    pub total_bits: u64,
    /// `log2 C(U, n)`.
    pub optimum_bits: f64,
}

/// A dynamic ordered set over `[0, U)` stored as a compressed treap.
#[derive(Clone, Debug)]
pub struct CTreap {
    codec: Arc<TreapCodec>,
    universe: u64,
    n: u64,
    mode: Mode,
    root: SpillPair,
}

enum Frame {
    Open { kind: NodeKind, sub: SubproblemId, pivot: Pivot, went_left: bool, sibling: Enc },
}

impl CTreap {
    pub fn new(codec: Arc<TreapCodec>, universe: u64) -> Result<Self> {
        Self::from_keys(codec, universe, &[])
    }

    /// Builds the canonical encoding of a sorted key set.
    pub fn from_keys(codec: Arc<TreapCodec>, universe: u64, keys: &[u64]) -> Result<Self> {
        if universe == 0 || universe > codec.weight_fn().domain_top() {
            return Err(Error::Config(format!(
                "universe {universe} outside the weight function's domain {}",
                codec.weight_fn().domain_top()
            )));
        }
        let mut t = CTreap { codec, universe, n: 0, mode: Mode::Normal, root: SpillPair::empty() };
        t.rebuild(keys)?;
        Ok(t)
    }

    fn rebuild(&mut self, keys: &[u64]) -> Result<()> {
        let n = keys.len() as u64;
        let sub = self.root_sub_n(n);
        self.codec.check_keys(&sub, keys)?;
        let p = self.codec.params();
        let ok = check_failure_predicate(self.codec.weight_fn(), p.t_fail, keys).is_ok();
        if ok {
            self.root = self.codec.encode_pair_unchecked(&sub, keys)?;
            self.mode = Mode::Normal;
        } else {
            let words = failure_encode(keys, self.universe)?;
            self.root = SpillPair::new(VirtualMemory::from_words(words), BigNat::zero(), BigNat::one())?;
            self.mode = Mode::Failure;
        }
        self.n = n;
        Ok(())
    }

    pub fn codec(&self) -> &Arc<TreapCodec> {
        &self.codec
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn universe(&self) -> u64 {
        self.universe
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The root spill pair (the payload words in failure mode).
    pub fn root(&self) -> &SpillPair {
        &self.root
    }

    fn root_sub_n(&self, n: u64) -> SubproblemId {
        SubproblemId::new(n, 0, self.universe, self.codec.weight_fn().w() - 1)
    }

    pub fn root_sub(&self) -> SubproblemId {
        self.root_sub_n(self.n)
    }

    /// All keys in increasing order.
    pub fn keys(&self) -> Result<Vec<u64>> {
        match self.mode {
            Mode::Normal => self.codec.decode_pair(&self.root_sub(), &self.root),
            Mode::Failure => failure_decode(self.root.vm.words(), self.universe, self.n),
        }
    }

    /// Walks the search path; `step` returns `Some(go_left)` to continue or
    /// `None` to stop at this pivot.
    fn walk<T>(
        &self,
        mut step: impl FnMut(&Pivot, &mut T) -> Option<bool>,
        mut acc: T,
    ) -> Result<(T, Option<Pivot>, OpTrace)> {
        let mut node = Node { sub: self.root_sub(), enc: Enc::Pair(self.root.clone()) };
        let mut trace = OpTrace::default();
        while let Some(o) = self.codec.open(&node)? {
            trace.visited += 1;
            match step(&o.pivot, &mut acc) {
                None => return Ok((acc, Some(o.pivot), trace)),
                Some(true) => node = o.left,
                Some(false) => node = o.right,
            }
        }
        Ok((acc, None, trace))
    }

    /// Number of keys `< x`.
    pub fn rank(&self, x: u64) -> Result<u64> {
        self.rank_traced(x).map(|r| r.0)
    }

    pub fn rank_traced(&self, x: u64) -> Result<(u64, OpTrace)> {
        if self.mode == Mode::Failure {
            let keys = self.keys()?;
            let trace = OpTrace { words_read: self.root.vm.len(), ..OpTrace::default() };
            return Ok((keys.partition_point(|&k| k < x) as u64, trace));
        }
        let (count, _, trace) = self.walk(
            |pv, acc: &mut u64| {
                if x <= pv.p {
                    Some(true)
                } else {
                    *acc += pv.r + 1;
                    Some(false)
                }
            },
            0u64,
        )?;
        Ok((count, OpTrace { words_read: self.root.vm.len(), ..trace }))
    }

    /// The `i`-th smallest key (0-based).
    pub fn select(&self, i: u64) -> Result<u64> {
        self.select_traced(i).map(|r| r.0)
    }

    pub fn select_traced(&self, i: u64) -> Result<(u64, OpTrace)> {
        if i >= self.n {
            return Err(Error::Domain(format!("select({i}) on {} keys", self.n)));
        }
        if self.mode == Mode::Failure {
            let trace = OpTrace { words_read: self.root.vm.len(), ..OpTrace::default() };
            return Ok((self.keys()?[i as usize], trace));
        }
        let (_, found, trace) = self.walk(
            |pv, acc: &mut u64| match (*acc).cmp(&pv.r) {
                std::cmp::Ordering::Less => Some(true),
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => {
                    *acc -= pv.r + 1;
                    Some(false)
                }
            },
            i,
        )?;
        let pv = found.ok_or_else(|| Error::Corruption("select ran off the tree".into()))?;
        Ok((pv.p, OpTrace { words_read: self.root.vm.len(), ..trace }))
    }

    pub fn contains(&self, x: u64) -> Result<bool> {
        if x >= self.universe {
            return Ok(false);
        }
        if self.mode == Mode::Failure {
            return Ok(self.keys()?.binary_search(&x).is_ok());
        }
        let (_, found, _) = self.walk(|pv, _: &mut ()| if x == pv.p { None } else { Some(x < pv.p) }, ())?;
        Ok(found.is_some())
    }

    /// Inserts `x`; errors if it is already present.
    pub fn insert(&mut self, x: u64) -> Result<OpTrace> {
        if x >= self.universe {
            return Err(Error::Domain(format!("key {x} outside [0, {})", self.universe)));
        }
        let wx = self.codec.weight_fn().weight(x);
        if self.mode == Mode::Normal {
            let keys = self.keys()?;
            if keys.binary_search(&x).is_ok() {
                return Err(Error::Precondition(format!("key {x} already present")));
            }
            let h = self.codec.weight_fn();
            if wx < self.codec.params().t_fail || keys.iter().any(|&k| h.weight(k) == wx) {
                let mut keys = keys;
                keys.insert(keys.partition_point(|&k| k < x), x);
                self.rebuild(&keys)?;
                return Ok(OpTrace { rebuilt: self.n, mode_flip: true, ..OpTrace::default() });
            }
            return self.update_path(x, true);
        }
        let mut keys = self.keys()?;
        let pos = match keys.binary_search(&x) {
            Ok(_) => return Err(Error::Precondition(format!("key {x} already present"))),
            Err(p) => p,
        };
        keys.insert(pos, x);
        self.rebuild(&keys)?;
        Ok(OpTrace { rebuilt: self.n, ..OpTrace::default() })
    }

    /// Deletes `x`; errors if it is absent.
    pub fn delete(&mut self, x: u64) -> Result<OpTrace> {
        if self.mode == Mode::Normal {
            if !self.contains(x)? {
                return Err(Error::Precondition(format!("key {x} not present")));
            }
            return self.update_path(x, false);
        }
        let mut keys = self.keys()?;
        let pos = keys.binary_search(&x).map_err(|_| Error::Precondition(format!("key {x} not present")))?;
        keys.remove(pos);
        self.rebuild(&keys)?;
        Ok(OpTrace { rebuilt: self.n, mode_flip: self.mode == Mode::Normal, ..OpTrace::default() })
    }

    /// Rebuilds the subtree where `x` enters or leaves and re-encodes the
    /// nodes above it.
    fn update_path(&mut self, x: u64, insert: bool) -> Result<OpTrace> {
        let codec = self.codec.clone();
        let wx = codec.weight_fn().weight(x);
        let mut trace = OpTrace::default();
        let mut frames: Vec<Frame> = Vec::new();
        let mut node = Node { sub: self.root_sub(), enc: Enc::Pair(self.root.clone()) };
        while let Some(o) = codec.open(&node)? {
            let stop = if insert { o.pivot.hp < wx } else { o.pivot.p == x };
            if stop {
                break;
            }
            trace.visited += 1;
            let went_left = x < o.pivot.p;
            let (next, sibling) = if went_left { (o.left, o.right) } else { (o.right, o.left) };
            frames.push(Frame::Open { kind: o.kind, sub: node.sub, pivot: o.pivot, went_left, sibling: sibling.enc });
            node = next;
        }
        let mut keys = Vec::with_capacity(node.sub.n as usize + 1);
        codec.collect(&node, &mut keys)?;
        if insert {
            keys.insert(keys.partition_point(|&k| k < x), x);
        } else {
            keys.retain(|&k| k != x);
        }
        let grow = |sub: SubproblemId| SubproblemId { n: if insert { sub.n + 1 } else { sub.n - 1 }, ..sub };
        let is_pair = matches!(node.enc, Enc::Pair(_));
        let new_sub = grow(node.sub);
        trace.rebuilt = new_sub.n;
        let mut enc = codec.encode_like(&new_sub, &keys, is_pair)?;
        for Frame::Open { kind, sub, mut pivot, went_left, sibling } in frames.into_iter().rev() {
            let sub = grow(sub);
            if went_left {
                pivot.r = if insert { pivot.r + 1 } else { pivot.r - 1 };
                enc = codec.join(kind, &sub, &pivot, &enc, &sibling)?;
            } else {
                enc = codec.join(kind, &sub, &pivot, &sibling, &enc)?;
            }
        }
        let Enc::Pair(root) = enc else {
            return Err(Error::Precondition("root re-encoded without a spill pair".into()));
        };
        trace.words_changed = changed_words(self.root.vm.words(), root.vm.words());
        self.root = root;
        self.n = if insert { self.n + 1 } else { self.n - 1 };
        Ok(trace)
    }

    /// True when the stored encoding equals the from-scratch encoding of the key set.
    pub fn is_canonical(&self) -> Result<bool> {
        let keys = self.keys()?;
        let fresh = CTreap::from_keys(self.codec.clone(), self.universe, &keys)?;
        Ok(fresh.mode == self.mode && fresh.root == self.root)
    }

    /// Reads word `i` of the virtual memory of the node reached by `path`
    /// (`true` = left) and reports where that word physically lives.
    pub fn vm_word(&self, path: &[bool], i: usize) -> Result<VmRead> {
        if self.mode == Mode::Failure {
            return Err(Error::Precondition("failure mode has no node memories".into()));
        }
        let codec = &self.codec;
        // Per level: the node, and for nodes on the way down the child choice.
        let mut chain: Vec<(SubproblemId, SpillPair, Pivot)> = Vec::new();
        let mut node = Node { sub: self.root_sub(), enc: Enc::Pair(self.root.clone()) };
        for &left in path {
            let o = codec.open(&node)?.ok_or_else(|| Error::Precondition("path leaves the tree".into()))?;
            if o.kind != NodeKind::Large {
                return Err(Error::Precondition("nodes inside a small subtree have no memory".into()));
            }
            let Enc::Pair(pair) = &node.enc else { unreachable!("large nodes hold pairs") };
            chain.push((node.sub, pair.clone(), o.pivot));
            node = if left { o.left } else { o.right };
        }
        let Enc::Pair(pair) = &node.enc else { unreachable!("children of large nodes hold pairs") };
        let value = pair.vm.read(i)?;
        let mut j = i;
        let mut hops = 0;
        for (depth, ((sub, _, pv), &left)) in chain.iter().zip(path).enumerate().rev() {
            hops += 1;
            let t = &codec.tables;
            let wr = t.wr();
            let (at, bt, ell) = t.rounded(sub);
            let (ls, _) = codec.child_subs(NodeKind::Large, sub, pv);
            let j_cat = if left { j } else { t.pair_size(&ls)?.m + j };
            let rkey = codec.rank_key(sub.n, at, bt, pv.p, pv.hp);
            let rank_fix = codec.rank_enc.output_size(&rkey)?.m;
            let hm = t.h_max(sub.n, ell, sub.hmax, pv.hp)?;
            let uni_fix = t.uniform.output_size(at / wr, bt / wr, hm)?.m;
            let wkey = TreapCodec::weight_key(sub.n, sub.hmax, ell);
            let w_fix = codec.weight_enc.output_size(&wkey)?.m;
            let m_node = t.pair_size(sub)?.m;
            if j_cat >= rank_fix || j_cat >= uni_fix || j_cat >= w_fix || j_cat >= m_node {
                return Ok(VmRead { value, location: WordLocation::Spill { depth }, hops });
            }
            j = j_cat;
        }
        if !path.is_empty() || j < self.root.vm.len() {
            return Ok(VmRead { value, location: WordLocation::Root(j), hops });
        }
        Err(Error::Domain(format!("word {i} outside the root memory")))
    }

    /// Bytes of the physical encoding: header words, root words (little
    /// endian) and the spill as a big-endian string sized by `K`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mode = match self.mode {
            Mode::Normal => 0u64,
            Mode::Failure => 1,
        };
        for wd in [mode, self.n, self.universe] {
            out.extend_from_slice(&wd.to_le_bytes());
        }
        for &wd in self.root.vm.words() {
            out.extend_from_slice(&wd.to_le_bytes());
        }
        let len = spill_bytes(&self.root.kmax);
        let mut be = self.root.k.to_bytes_be();
        if self.root.k.is_zero() {
            be.clear();
        }
        out.extend(std::iter::repeat_n(0u8, len - be.len()));
        out.extend(be);
        out
    }

    /// Parses [`CTreap::to_bytes`] output and checks that it decodes and is canonical.
    pub fn from_bytes(codec: Arc<TreapCodec>, bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
                .ok_or_else(|| Error::Corruption("truncated encoding".into()))
        };
        let mode = match word(0)? {
            0 => Mode::Normal,
            1 => Mode::Failure,
            m => return Err(Error::Corruption(format!("unknown mode {m}"))),
        };
        let (n, universe) = (word(1)?, word(2)?);
        let mut t = CTreap::new(codec, universe)?;
        let size = match mode {
            Mode::Normal => t.codec.pair_size(&t.root_sub_n(n))?,
            Mode::Failure => InputSize::new(failure_bits(universe, n).div_ceil(W) as usize, BigNat::one()),
        };
        let words = (0..size.m).map(|i| word(HEADER_WORDS + i)).collect::<Result<Vec<_>>>()?;
        let start = (HEADER_WORDS + size.m) * 8;
        let len = spill_bytes(&size.k);
        if bytes.len() != start + len {
            return Err(Error::Corruption("encoding length does not match its header".into()));
        }
        let k = BigNat::from_bytes_be(&bytes[start..]);
        t.root = SpillPair::new(VirtualMemory::from_words(words), k, size.k).map_err(|e| Error::Corruption(e.to_string()))?;
        t.n = n;
        t.mode = mode;
        if !t.is_canonical()? {
            return Err(Error::Corruption("encoding is not canonical".into()));
        }
        Ok(t)
    }

    pub fn space(&self) -> Result<SpaceAccount> {
        let frac = self.codec.params().frac;
        let optimum_bits = log2_cost(&binom_u64(self.universe, self.n), Rounding::Down, frac)?.to_f64();
        let m_words = self.root.vm.len();
        let log2_k = log2_cost(&self.root.kmax, Rounding::Up, frac)?.to_f64();
        let payload_bits = match self.mode {
            Mode::Normal => (m_words as u64 * W) as f64 + log2_k,
            Mode::Failure => failure_bits(self.universe, self.n) as f64,
        };
        let header_bits = HEADER_WORDS as u64 * W;
        let spill_bits = ceil_log2(&self.root.kmax);
        Ok(SpaceAccount {
            n: self.n,
            universe: self.universe,
            mode: self.mode,
            m_words,
            log2_k,
            payload_bits,
            header_bits,
            total_bits: header_bits + m_words as u64 * W + spill_bits,
            optimum_bits,
        })
    }

    /// Space audits of every pair-holding node (normal mode only).
    pub fn node_spaces(&self) -> Result<Vec<NodeSpace>> {
        if self.mode == Mode::Failure {
            return Ok(Vec::new());
        }
        self.codec.node_spaces(&self.root_sub(), &self.root)
    }
}

fn spill_bytes(kmax: &BigNat) -> usize {
    ceil_log2(kmax).div_ceil(8) as usize
}

fn changed_words(old: &[u64], new: &[u64]) -> usize {
    let common = old.len().min(new.len());
    (0..common).filter(|&i| old[i] != new[i]).count() + old.len().max(new.len()) - common
}
