//! Entropy coding of one symbol together with a spill pair.
//!
//! Three layers:
//!
//! * [`PrefixOffsetTable`]: the prefix-offset coder. Symbol `ψ` owns the integer
//!   interval `[off(ψ), off(ψ) + Z_ψ)` with `Z_ψ = 2^{N_short(ψ)} K_short(ψ)`.
//!   The code value `z` is split into `N_enc` low bits and a spill below
//!   `K_enc <= 2q`.
//! * [`EntropyEncoder`]: the general encoder over a family of distributions
//!   with per-symbol input sizes. It keeps a symbol-independent prefix of the
//!   input memory in place and folds the rest, the input spill and the symbol
//!   into one output spill.
//! * [`UniformEncoder`]: the table-free variant for uniform symbols, sized by
//!   an externally supplied upper bound `H_max`.
//!
//! Tables are built lazily per key and memoised.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::info::{DistIndex, DistRegistry, Distribution, Prob};
use crate::numeric::{log2_cost, pow2_scaled, BigNat, BitCost, Rounding};
use crate::vm::{from_words, spill_split, to_words, SpillPair, VirtualMemory};
use crate::WORD_BITS;

const W: u64 = WORD_BITS as u64;

/// Where distributions come from.
pub trait DistSource: Send + Sync {
    fn dist(&self, idx: &DistIndex) -> Result<Arc<dyn Distribution>>;
}

impl DistSource for DistRegistry {
    fn dist(&self, idx: &DistIndex) -> Result<Arc<dyn Distribution>> {
        self.get(idx)
    }
}

/// A member of an encoder family: the distribution plus caller context that
/// the size functions may depend on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncKey {
    pub dist: DistIndex,
    pub ctx: Vec<u64>,
}

impl EncKey {
    pub fn new(dist: DistIndex) -> Self {
        EncKey { dist, ctx: Vec::new() }
    }

    pub fn with_ctx(dist: DistIndex, ctx: Vec<u64>) -> Self {
        EncKey { dist, ctx }
    }
}

impl fmt::Display for EncKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.dist, self.ctx)
    }
}

/// Input memory length in words and spill universe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputSize {
    pub m: usize,
    pub k: BigNat,
}

impl InputSize {
    pub fn new(m: usize, k: BigNat) -> Self {
        InputSize { m, k }
    }

    pub fn of(pair: &SpillPair) -> Self {
        InputSize { m: pair.vm.len(), k: pair.kmax.clone() }
    }
}

/// Input size functions `M_in(ψ)`, `K_in(ψ)` of an encoder family.
pub trait SizeFn: Send + Sync {
    fn input_size(&self, key: &EncKey, sym: u64) -> Result<InputSize>;
}

/// Word-level operations performed on an output pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub reads: u64,
    pub writes: u64,
    pub allocs: u64,
    pub releases: u64,
    pub spill_writes: u64,
    /// Writes that clear stale input words left in the padding region.
    pub pad_writes: u64,
}

impl OpCount {
    pub fn word_ops(&self) -> u64 {
        self.reads + self.writes + self.allocs + self.releases
    }

    pub fn add(&mut self, o: &OpCount) {
        self.reads += o.reads;
        self.writes += o.writes;
        self.allocs += o.allocs;
        self.releases += o.releases;
        self.spill_writes += o.spill_writes;
        self.pad_writes += o.pad_writes;
    }
}

/// Prefix-offset coder for one distribution.
#[derive(Clone, Debug)]
pub struct PrefixOffsetTable {
    symbols: Vec<u64>,
    n_short: Vec<u64>,
    k_short: Vec<BigNat>,
    offsets: Vec<BigNat>,
    z: BigNat,
    n_enc: u64,
    k_enc: BigNat,
}

impl PrefixOffsetTable {
    /// `symbols` must be strictly increasing; each symbol gets capacity
    /// `2^{n_short} * k_short`.
    pub fn new(symbols: Vec<u64>, n_short: Vec<u64>, k_short: Vec<BigNat>, q: u64) -> Result<Self> {
        if symbols.is_empty() || symbols.len() != n_short.len() || symbols.len() != k_short.len() {
            return Err(Error::Precondition("PrefixOffsetTable needs one (N, K) pair per symbol".into()));
        }
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition("PrefixOffsetTable symbols must be increasing".into()));
        }
        if q == 0 {
            return Err(Error::Config("q must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(symbols.len());
        let mut z = BigNat::zero();
        for (n, k) in n_short.iter().zip(&k_short) {
            if k.is_zero() {
                return Err(Error::Precondition("K_short must be at least 1".into()));
            }
            offsets.push(z.clone());
            z += k << *n;
        }
        // N_enc = floor(log2(Z / q)) when Z >= 2q, else 0.
        let qn = BigNat::from(q);
        let ratio = &z / &qn;
        let n_enc = if ratio.is_zero() { 0 } else { ratio.bits() - 1 };
        let k_enc = crate::vm::ceil_shift(&z, n_enc);
        debug_assert!(k_enc <= BigNat::from(2 * q) || n_enc == 0 && z < BigNat::from(2 * q));
        Ok(PrefixOffsetTable { symbols, n_short, k_short, offsets, z, n_enc, k_enc })
    }

    pub fn symbols(&self) -> &[u64] {
        &self.symbols
    }

    pub fn z(&self) -> &BigNat {
        &self.z
    }

    pub fn n_enc(&self) -> u64 {
        self.n_enc
    }

    pub fn k_enc(&self) -> &BigNat {
        &self.k_enc
    }

    pub fn n_short(&self, pos: usize) -> u64 {
        self.n_short[pos]
    }

    pub fn k_short(&self, pos: usize) -> &BigNat {
        &self.k_short[pos]
    }

    pub fn offset(&self, pos: usize) -> &BigNat {
        &self.offsets[pos]
    }

    /// Position of `sym` in the symbol order.
    pub fn position(&self, sym: u64) -> Result<usize> {
        self.symbols
            .binary_search(&sym)
            .map_err(|_| Error::Precondition(format!("symbol {sym} outside the support")))
    }

    /// Encodes `(sym, m_short, k_short)` as `(m_enc, k_enc)` where `m_enc`
    /// holds `N_enc` bits.
    pub fn encode(&self, sym: u64, m_short: &BigNat, k_short: &BigNat) -> Result<(BigNat, BigNat)> {
        let pos = self.position(sym)?;
        if m_short.bits() > self.n_short[pos] || k_short >= &self.k_short[pos] {
            return Err(Error::Precondition(format!("short input does not match the sizes of symbol {sym}")));
        }
        let z = &self.offsets[pos] + m_short * &self.k_short[pos] + k_short;
        let hi = &z >> self.n_enc;
        let lo = &z - (&hi << self.n_enc);
        Ok((lo, hi))
    }

    /// Inverse of [`PrefixOffsetTable::encode`].
    pub fn decode(&self, m_enc: &BigNat, k_enc: &BigNat) -> Result<(u64, BigNat, BigNat)> {
        if m_enc.bits() > self.n_enc || k_enc >= &self.k_enc {
            return Err(Error::Corruption("encoded pair outside its universe".into()));
        }
        let z = (k_enc << self.n_enc) | m_enc;
        if z >= self.z {
            return Err(Error::Corruption(format!("code value {z} not below Z = {}", self.z)));
        }
        let pos = match self.offsets.binary_search(&z) {
            Ok(p) => p,
            Err(p) => p - 1,
        };
        let rem = &z - &self.offsets[pos];
        let (m_short, k_short) = rem.div_rem(&self.k_short[pos]);
        Ok((self.symbols[pos], m_short, k_short))
    }

    /// `N_enc + log2 K_enc - log2 Z`, rounded up.
    pub fn redundancy(&self, frac: u32) -> Result<BitCost> {
        let space = BitCost::from_int(self.n_enc as i64, frac) + log2_cost(&self.k_enc, Rounding::Up, frac)?;
        Ok((space - log2_cost(&self.z, Rounding::Down, frac)?).with_rounding(Rounding::Up))
    }
}

/// `D̃(ψ) = (1 - 1/(2q)) D(ψ) + 1/(2q |supp|)`, exactly.
pub fn perturb(p: &Prob, q: u64, supp: u64) -> Prob {
    let two_q = BigNat::from(2 * q);
    let s = BigNat::from(supp);
    let num = (&two_q - 1u32) * &p.num * &s + &p.den;
    let den = two_q * s * &p.den;
    Prob { num, den }
}

/// Per-member tables of the general encoder.
#[derive(Debug)]
pub struct EncoderTable {
    pub key: EncKey,
    pub prefix: PrefixOffsetTable,
    pub m_in: Vec<usize>,
    pub k_in: Vec<BigNat>,
    pub n_spill: Vec<u64>,
    pub m_max: usize,
    pub m_fix: usize,
    pub k_out: BigNat,
    n_short: Vec<u64>,
    k_short: Vec<BigNat>,
    probs: Vec<Prob>,
}

impl EncoderTable {
    pub fn m_out(&self) -> usize {
        self.m_fix
    }

    fn rem_len(&self, pos: usize) -> usize {
        self.m_in[pos].saturating_sub(self.m_fix)
    }

    /// `w M_out + log2 K_out`, rounded up.
    pub fn space(&self, frac: u32) -> Result<BitCost> {
        Ok(BitCost::from_int((self.m_fix as u64 * W) as i64, frac) + log2_cost(&self.k_out, Rounding::Up, frac)?)
    }

    pub fn probs(&self) -> &[Prob] {
        &self.probs
    }

    /// `max_ψ log2(1/D(ψ)) + w M_in(ψ) + log2 K_in(ψ)`, rounded down.
    pub fn h_in(&self, frac: u32) -> Result<BitCost> {
        let mut best: Option<BitCost> = None;
        for (i, p) in self.probs.iter().enumerate() {
            let words = BitCost::from_int((self.m_in[i] as u64 * W) as i64, frac);
            let a = p.cost(Rounding::Down, frac)? + words + log2_cost(&self.k_in[i], Rounding::Down, frac)?;
            best = Some(best.map_or(a, |h| h.max(a)));
        }
        Ok(best.expect("nonempty").with_rounding(Rounding::Down))
    }

    /// The same maximum under `D̃` with the short sizes, rounded up.
    pub fn h_short(&self, q: u64, frac: u32) -> Result<BitCost> {
        let supp = self.probs.len() as u64;
        let mut best: Option<BitCost> = None;
        for (i, p) in self.probs.iter().enumerate() {
            let b = perturb(p, q, supp).cost(Rounding::Up, frac)?
                + BitCost::from_int(self.n_short[i] as i64, frac)
                + log2_cost(&self.k_short[i], Rounding::Up, frac)?;
            best = Some(best.map_or(b, |h| h.max(b)));
        }
        Ok(best.expect("nonempty").with_rounding(Rounding::Up))
    }
}

/// Space audit of one family member.
#[derive(Clone, Debug)]
pub struct EncoderAudit {
    pub key: EncKey,
    pub space: BitCost,
    pub h_in: BitCost,
    /// `space - h_in`, rounded up; the bound is `7/q`.
    pub excess: BitCost,
    pub log2_z: BitCost,
    pub h_short: BitCost,
    pub m_out: usize,
}

/// Construction parameters of an [`EntropyEncoder`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub q: u64,
    /// Upper bound on `log2 K_in` over the family.
    pub kin_bits_max: u64,
    /// Upper bound on the support size over the family.
    pub supp_max: u64,
    pub frac: u32,
    /// Maximum number of memoised member tables.
    pub cap: usize,
}

impl EncoderParams {
    /// `β` from `β w >= 4 (log2 max K_in + log2 q + log2 max |supp| + 10)`.
    pub fn beta(&self) -> usize {
        let log_q = 64 - self.q.max(1).leading_zeros() as u64;
        let log_s = 64 - self.supp_max.max(1).leading_zeros() as u64;
        let need = 4 * (self.kin_bits_max + log_q + log_s + 10);
        need.div_ceil(W) as usize
    }
}

/// The general entropy encoder over a family of distributions.
pub struct EntropyEncoder {
    source: Arc<dyn DistSource>,
    sizes: Arc<dyn SizeFn>,
    params: EncoderParams,
    beta: usize,
    tables: RwLock<HashMap<EncKey, Arc<EncoderTable>>>,
}

impl fmt::Debug for EntropyEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EntropyEncoder")
            .field("q", &self.params.q)
            .field("beta", &self.beta)
            .field("tables", &self.table_count())
            .finish()
    }
}

impl EntropyEncoder {
    pub fn new(source: Arc<dyn DistSource>, sizes: Arc<dyn SizeFn>, params: EncoderParams) -> Result<Self> {
        if params.q < 1 {
            return Err(Error::Config("q must be positive".into()));
        }
        let beta = params.beta();
        Ok(EntropyEncoder { source, sizes, params, beta, tables: RwLock::new(HashMap::new()) })
    }

    pub fn q(&self) -> u64 {
        self.params.q
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn table_count(&self) -> usize {
        self.tables.read().expect("encoder lock").len()
    }

    pub fn keys(&self) -> Vec<EncKey> {
        let mut v: Vec<EncKey> = self.tables.read().expect("encoder lock").keys().cloned().collect();
        v.sort();
        v
    }

    /// The memoised table of `key`, built on first use.
    pub fn table(&self, key: &EncKey) -> Result<Arc<EncoderTable>> {
        if let Some(t) = self.tables.read().expect("encoder lock").get(key) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.build(key)?);
        let mut tables = self.tables.write().expect("encoder lock");
        // Tables are pure functions of their key, so a full cache can simply be dropped.
        if tables.len() >= self.params.cap && !tables.contains_key(key) {
            tables.clear();
        }
        Ok(tables.entry(key.clone()).or_insert(t).clone())
    }

    fn build(&self, key: &EncKey) -> Result<EncoderTable> {
        let q = self.params.q;
        let dist = self.source.dist(&key.dist)?;
        let symbols = dist.support();
        if symbols.is_empty() {
            return Err(Error::Precondition(format!("{} has empty support", key.dist)));
        }
        let mut m_in = Vec::with_capacity(symbols.len());
        let mut k_in = Vec::with_capacity(symbols.len());
        for &s in &symbols {
            let sz = self.sizes.input_size(key, s)?;
            if sz.k.is_zero() {
                return Err(Error::Precondition(format!("K_in({s}) = 0 for {key}")));
            }
            m_in.push(sz.m);
            k_in.push(sz.k);
        }
        let m_max = *m_in.iter().max().expect("nonempty");
        let m_fix = m_max.saturating_sub(self.beta);
        let (lo, hi) = (BigNat::from(q), BigNat::from(2 * q));
        let mut n_spill = Vec::with_capacity(symbols.len());
        let mut n_short = Vec::with_capacity(symbols.len());
        let mut k_short = Vec::with_capacity(symbols.len());
        for i in 0..symbols.len() {
            let sp = spill_split(&BigNat::zero(), &k_in[i], &lo, &hi)?;
            let rem = m_in[i].saturating_sub(m_fix) as u64;
            n_spill.push(sp.nbits);
            n_short.push(rem * W + sp.nbits);
            k_short.push(sp.kmax_rest);
        }
        let prefix = PrefixOffsetTable::new(symbols.clone(), n_short.clone(), k_short.clone(), q)?;
        let k_out = prefix.k_enc() << prefix.n_enc();
        let probs = symbols.iter().map(|&s| dist.prob(s)).collect();
        Ok(EncoderTable {
            key: key.clone(),
            prefix,
            m_in,
            k_in,
            n_spill,
            m_max,
            m_fix,
            k_out,
            n_short,
            k_short,
            probs,
        })
    }

    /// `(M_out, K_out)` of a member; independent of the symbol.
    pub fn output_size(&self, key: &EncKey) -> Result<InputSize> {
        let t = self.table(key)?;
        Ok(InputSize { m: t.m_fix, k: t.k_out.clone() })
    }

    /// Encodes `sym` together with `input`, whose sizes must equal
    /// `(M_in(sym), K_in(sym))`.
    pub fn encode(&self, key: &EncKey, sym: u64, input: &SpillPair) -> Result<SpillPair> {
        let t = self.table(key)?;
        encode_with(&t, sym, input)
    }

    /// Recovers `(sym, input)` from an output pair.
    pub fn decode(&self, key: &EncKey, out: &SpillPair) -> Result<(u64, SpillPair)> {
        let t = self.table(key)?;
        decode_with(&t, out)
    }

    pub fn read_symbol(&self, key: &EncKey, out: &SpillPair) -> Result<u64> {
        let t = self.table(key)?;
        Ok(decode_short(&t, out)?.0)
    }

    /// Reads input word `i`.
    pub fn read_word(&self, key: &EncKey, out: &SpillPair, i: usize) -> Result<(u64, OpCount)> {
        let t = self.table(key)?;
        let (sym, m_rem, _) = decode_short(&t, out)?;
        let pos = t.prefix.position(sym)?;
        if i >= t.m_in[pos] {
            return Err(Error::Precondition(format!("input word {i} beyond M_in = {}", t.m_in[pos])));
        }
        if i < t.m_fix {
            let ops = OpCount { reads: 1, ..OpCount::default() };
            return Ok((out.vm.read(i)?, ops));
        }
        Ok((m_rem[i - t.m_fix], OpCount::default()))
    }

    /// Writes input word `i`.
    pub fn write_word(&self, key: &EncKey, out: &mut SpillPair, i: usize, v: u64) -> Result<OpCount> {
        let t = self.table(key)?;
        let (sym, mut m_rem, k_in) = decode_short(&t, out)?;
        let pos = t.prefix.position(sym)?;
        if i >= t.m_in[pos] {
            return Err(Error::Precondition(format!("input word {i} beyond M_in = {}", t.m_in[pos])));
        }
        if i < t.m_fix {
            out.vm.write(i, v)?;
            return Ok(OpCount { writes: 1, ..OpCount::default() });
        }
        m_rem[i - t.m_fix] = v;
        out.k = encode_spill(&t, pos, &m_rem, &k_in)?;
        Ok(OpCount { spill_writes: 1, ..OpCount::default() })
    }

    pub fn read_spill(&self, key: &EncKey, out: &SpillPair) -> Result<BigNat> {
        let t = self.table(key)?;
        Ok(decode_short(&t, out)?.2)
    }

    pub fn write_spill(&self, key: &EncKey, out: &mut SpillPair, k: BigNat) -> Result<OpCount> {
        let t = self.table(key)?;
        let (sym, m_rem, _) = decode_short(&t, out)?;
        let pos = t.prefix.position(sym)?;
        if k >= t.k_in[pos] {
            return Err(Error::Precondition("input spill not below K_in".into()));
        }
        out.k = encode_spill(&t, pos, &m_rem, &k)?;
        Ok(OpCount { spill_writes: 1, ..OpCount::default() })
    }

    /// Switches to member `new_key` and symbol `new_sym`. The input memory
    /// keeps its common prefix, new words are zero, and the input spill
    /// becomes `new_k_in`.
    pub fn change(
        &self,
        key: &EncKey,
        out: &mut SpillPair,
        new_key: &EncKey,
        new_sym: u64,
        new_k_in: BigNat,
    ) -> Result<OpCount> {
        let t_new = self.table(new_key)?;
        let (_, old_in) = self.decode(key, out)?;
        let pos = t_new.prefix.position(new_sym)?;
        let m_new = t_new.m_in[pos];
        let mut words = old_in.vm.into_words();
        words.resize(m_new, 0);
        let input = SpillPair::new(VirtualMemory::from_words(words), new_k_in, t_new.k_in[pos].clone())?;
        let target = encode_with(&t_new, new_sym, &input)?;
        Ok(apply_output(out, target))
    }

    /// Exact-space audit of one member.
    pub fn audit(&self, key: &EncKey) -> Result<EncoderAudit> {
        let t = self.table(key)?;
        let frac = self.params.frac;
        let space = t.space(frac)?;
        let h_in = t.h_in(frac)?;
        Ok(EncoderAudit {
            key: key.clone(),
            space,
            h_in,
            excess: (space - h_in).with_rounding(Rounding::Up),
            log2_z: log2_cost(t.prefix.z(), Rounding::Down, frac)?,
            h_short: t.h_short(self.params.q, frac)?,
            m_out: t.m_fix,
        })
    }

    /// `7/q` in fixed point, rounded down.
    pub fn excess_bound(&self) -> BitCost {
        let frac = self.params.frac;
        BitCost::from_raw((7i128 << frac) / self.params.q as i128, frac, Rounding::Down)
    }
}

/// Mutates `out` into `target`, counting the word operations.
fn apply_output(out: &mut SpillPair, target: SpillPair) -> OpCount {
    let mut ops = OpCount::default();
    let common = out.vm.len().min(target.vm.len());
    for i in 0..common {
        let v = target.vm.words()[i];
        if out.vm.words()[i] != v {
            out.vm.write(i, v).expect("in range");
            ops.pad_writes += 1;
        }
    }
    while out.vm.len() < target.vm.len() {
        let i = out.vm.len();
        out.vm.allocate();
        out.vm.write(i, target.vm.words()[i]).expect("in range");
        ops.allocs += 1;
        ops.writes += 1;
    }
    while out.vm.len() > target.vm.len() {
        let i = out.vm.len() - 1;
        let _ = out.vm.read(i);
        out.vm.release().expect("nonempty");
        ops.reads += 1;
        ops.releases += 1;
    }
    out.k = target.k;
    out.kmax = target.kmax;
    ops.spill_writes = 1;
    ops
}

fn encode_with(t: &EncoderTable, sym: u64, input: &SpillPair) -> Result<SpillPair> {
    let pos = t.prefix.position(sym)?;
    if input.vm.len() != t.m_in[pos] || input.kmax != t.k_in[pos] {
        return Err(Error::Precondition(format!(
            "input sizes ({}, {}) differ from ({}, {}) for symbol {sym} of {}",
            input.vm.len(),
            input.kmax,
            t.m_in[pos],
            t.k_in[pos],
            t.key
        )));
    }
    let words = input.vm.words();
    let keep = t.m_in[pos].min(t.m_fix);
    let mut fixed = words[..keep].to_vec();
    fixed.resize(t.m_fix, 0);
    let m_rem = if t.m_in[pos] > t.m_fix { &words[t.m_fix..] } else { &[][..] };
    let k = encode_spill(t, pos, m_rem, &input.k)?;
    Ok(SpillPair { vm: VirtualMemory::from_words(fixed), k, kmax: t.k_out.clone() })
}

/// Steps 1 to 3 on the short part: returns `k_out`.
fn encode_spill(t: &EncoderTable, pos: usize, m_rem: &[u64], k_in: &BigNat) -> Result<BigNat> {
    let nb = t.n_spill[pos];
    let k_short = k_in >> nb;
    let low = k_in - (&k_short << nb);
    let m_short = (from_words(m_rem) << nb) | low;
    let (m_enc, k_enc) = t.prefix.encode(t.prefix.symbols[pos], &m_short, &k_short)?;
    Ok(m_enc * t.prefix.k_enc() + k_enc)
}

/// Decodes the spill of `out` into `(sym, m_rem, k_in)`.
fn decode_short(t: &EncoderTable, out: &SpillPair) -> Result<(u64, Vec<u64>, BigNat)> {
    if out.vm.len() != t.m_fix || out.kmax != t.k_out {
        return Err(Error::Corruption(format!("output pair sizes do not match {}", t.key)));
    }
    if out.k >= t.k_out {
        return Err(Error::Corruption("output spill not below K_out".into()));
    }
    let (m_enc, k_enc) = out.k.div_rem(t.prefix.k_enc());
    let (sym, m_short, k_short) = t.prefix.decode(&m_enc, &k_enc)?;
    let pos = t.prefix.position(sym)?;
    let nb = t.n_spill[pos];
    let rem_words = t.rem_len(pos);
    let low = &m_short - ((&m_short >> nb) << nb);
    let k_in = (k_short << nb) | low;
    if k_in >= t.k_in[pos] {
        return Err(Error::Corruption(format!("decoded input spill exceeds K_in for symbol {sym}")));
    }
    let m_rem = to_words(&(&m_short >> nb), rem_words as u64 * W);
    Ok((sym, m_rem, k_in))
}

fn decode_with(t: &EncoderTable, out: &SpillPair) -> Result<(u64, SpillPair)> {
    let (sym, m_rem, k_in) = decode_short(t, out)?;
    let pos = t.prefix.position(sym)?;
    let keep = t.m_in[pos].min(t.m_fix);
    let mut words = out.vm.words()[..keep].to_vec();
    words.extend_from_slice(&m_rem);
    Ok((sym, SpillPair { vm: VirtualMemory::from_words(words), k: k_in, kmax: t.k_in[pos].clone() }))
}

/// `(M_max, K_max)` of the uniform encoder for one `H_max`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UniformShape {
    pub m_max: usize,
    pub k_max: BigNat,
    /// True when `H_max <= β w` and everything goes to the spill.
    pub small: bool,
}

/// Entropy encoder for a uniform symbol over `[lo, hi)`.
#[derive(Clone, Debug)]
pub struct UniformEncoder {
    beta: u64,
    frac: u32,
}

impl UniformEncoder {
    /// `β` from `β w >= 10 log2 max K_in`.
    pub fn new(kin_bits_max: u64, frac: u32) -> Self {
        UniformEncoder { beta: (10 * kin_bits_max).div_ceil(W).max(1), frac }
    }

    pub fn beta(&self) -> u64 {
        self.beta
    }

    /// The two-case rule for `(M_max, K_max)`.
    pub fn shape(&self, h_max: BitCost) -> Result<UniformShape> {
        if h_max.is_negative() {
            return Err(Error::Precondition(format!("H_max = {h_max} is negative")));
        }
        let frac = h_max.frac();
        let threshold = BitCost::from_int((self.beta * W) as i64, frac);
        if h_max <= threshold {
            let k_max = pow2_scaled(&BigNat::one(), h_max, Rounding::Down);
            return Ok(UniformShape { m_max: 0, k_max, small: true });
        }
        let m_max = (h_max.floor_int() / W as i128 - self.beta as i128).max(0) as usize;
        let rest = h_max - BitCost::from_int((m_max as u64 * W) as i64, frac);
        let k_max = pow2_scaled(&BigNat::one(), rest, Rounding::Up);
        Ok(UniformShape { m_max, k_max, small: false })
    }

    /// `(M_out, K_out) = (M_max, K_max (hi - lo))`.
    pub fn output_size(&self, lo: u64, hi: u64, h_max: BitCost) -> Result<InputSize> {
        check_range(lo, hi)?;
        let s = self.shape(h_max)?;
        Ok(InputSize { m: s.m_max, k: s.k_max * BigNat::from(hi - lo) })
    }

    pub fn encode(&self, lo: u64, hi: u64, h_max: BitCost, sym: u64, input: &SpillPair) -> Result<SpillPair> {
        check_range(lo, hi)?;
        if sym < lo || sym >= hi {
            return Err(Error::Precondition(format!("symbol {sym} outside [{lo}, {hi})")));
        }
        let s = self.shape(h_max)?;
        let m_in = input.vm.len();
        if s.m_max > m_in {
            return Err(Error::Config(format!("uniform encoder needs M_max = {} <= M_in = {m_in}", s.m_max)));
        }
        let extra_bits = (m_in - s.m_max) as u64 * W;
        let room = &input.kmax << extra_bits;
        if room > s.k_max {
            return Err(Error::CapacityViolation(format!(
                "input of {} bits exceeds H_max = {h_max}",
                extra_bits as f64 + crate::vm::universe_bits(&input.kmax) + (s.m_max as u64 * W) as f64
            )));
        }
        let words = input.vm.words();
        let k_adj = from_words(&words[s.m_max..]) * &input.kmax + &input.k;
        let k = BigNat::from(sym - lo) * &s.k_max + k_adj;
        let kmax = &s.k_max * BigNat::from(hi - lo);
        Ok(SpillPair { vm: VirtualMemory::from_words(words[..s.m_max].to_vec()), k, kmax })
    }

    /// Reads the symbol without any input sizes.
    pub fn read_symbol(&self, lo: u64, hi: u64, h_max: BitCost, out: &SpillPair) -> Result<u64> {
        check_range(lo, hi)?;
        let s = self.shape(h_max)?;
        if out.k >= out.kmax || out.kmax != &s.k_max * BigNat::from(hi - lo) {
            return Err(Error::Corruption("uniform output spill does not match H_max".into()));
        }
        let idx = (&out.k / &s.k_max).to_u64().ok_or_else(|| Error::Corruption("symbol overflow".into()))?;
        Ok(lo + idx)
    }

    /// Recovers `(sym, input)`; `sizes` maps the symbol to its input sizes.
    pub fn decode(
        &self,
        lo: u64,
        hi: u64,
        h_max: BitCost,
        out: &SpillPair,
        sizes: impl FnOnce(u64) -> Result<InputSize>,
    ) -> Result<(u64, SpillPair)> {
        let sym = self.read_symbol(lo, hi, h_max, out)?;
        let s = self.shape(h_max)?;
        if out.vm.len() != s.m_max {
            return Err(Error::Corruption("uniform output memory size does not match H_max".into()));
        }
        let sz = sizes(sym)?;
        if sz.m < s.m_max || sz.k.is_zero() {
            return Err(Error::Corruption(format!("input sizes for symbol {sym} are inconsistent")));
        }
        let k_adj = &out.k % &s.k_max;
        let (hi_part, k_in) = k_adj.div_rem(&sz.k);
        let extra_bits = (sz.m - s.m_max) as u64 * W;
        if hi_part.bits() > extra_bits {
            return Err(Error::Corruption(format!("moved words overflow for symbol {sym}")));
        }
        let mut words = out.vm.words().to_vec();
        words.extend(to_words(&hi_part, extra_bits));
        Ok((sym, SpillPair { vm: VirtualMemory::from_words(words), k: k_in, kmax: sz.k }))
    }

    /// `w M_out + log2 K_out - (H_max + log2(hi - lo))`, rounded up.
    pub fn excess(&self, lo: u64, hi: u64, h_max: BitCost) -> Result<BitCost> {
        let out = self.output_size(lo, hi, h_max)?;
        let frac = self.frac;
        let space = BitCost::from_int((out.m as u64 * W) as i64, frac) + log2_cost(&out.k, Rounding::Up, frac)?;
        let bound = h_max + log2_cost(&BigNat::from(hi - lo), Rounding::Down, frac)?;
        Ok((space - bound).with_rounding(Rounding::Up))
    }
}

fn check_range(lo: u64, hi: u64) -> Result<()> {
    if lo >= hi {
        return Err(Error::Precondition(format!("empty uniform range [{lo}, {hi})")));
    }
    Ok(())
}
