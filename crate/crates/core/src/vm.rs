//! Virtual memories, spillover pairs, the two-input adapter and the chunked
//! allocator that hosts many virtual memories in one physical buffer.
//!
//! Addresses are 0-based throughout.

use std::fmt::Write as _;

use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::numeric::{log2_cost, BigNat, BitCost, Rounding};
use crate::WORD_BITS;

/// A resizable array of 64-bit words.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct VirtualMemory {
    words: Vec<u64>,
}

impl VirtualMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words(words: Vec<u64>) -> Self {
        VirtualMemory { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Appends one word. Its content is unspecified; this implementation
    /// zeroes it.
    pub fn allocate(&mut self) {
        self.words.push(0);
    }

    pub fn release(&mut self) -> Result<()> {
        self.words.pop().map(|_| ()).ok_or_else(|| Error::Precondition("release on an empty VM".into()))
    }

    pub fn read(&self, addr: usize) -> Result<u64> {
        self.words
            .get(addr)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("read at {addr} beyond size {}", self.words.len())))
    }

    pub fn write(&mut self, addr: usize, v: u64) -> Result<()> {
        let len = self.words.len();
        let slot = self
            .words
            .get_mut(addr)
            .ok_or_else(|| Error::Precondition(format!("write at {addr} beyond size {len}")))?;
        *slot = v;
        Ok(())
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }
}

/// A memory part plus a spill `k < K`; it occupies `w * M + log2 K` bits.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpillPair {
    pub vm: VirtualMemory,
    pub k: BigNat,
    pub kmax: BigNat,
}

impl SpillPair {
    pub fn new(vm: VirtualMemory, k: BigNat, kmax: BigNat) -> Result<Self> {
        if k >= kmax {
            return Err(Error::Precondition(format!("spill {k} not below its universe {kmax}")));
        }
        Ok(SpillPair { vm, k, kmax })
    }

    pub fn empty() -> Self {
        SpillPair { vm: VirtualMemory::new(), k: BigNat::zero(), kmax: BigNat::one() }
    }

    /// `w * M + log2 K`, rounded up.
    pub fn declared_bits(&self, frac: u32) -> BitCost {
        let words = BitCost::from_int((self.vm.len() as u64 * WORD_BITS as u64) as i64, frac);
        words + log2_cost(&self.kmax, Rounding::Up, frac).expect("K >= 1")
    }

    /// Checks `K <= 2^(c_spill * w)`.
    pub fn check_cap(&self, c_spill: u32) -> Result<()> {
        if self.kmax > BigNat::one() << (c_spill * WORD_BITS) {
            return Err(Error::CapacityViolation(format!("spill universe of {} bits exceeds the cap", self.kmax.bits())));
        }
        Ok(())
    }

    /// Text dump used by golden tests: word size, memory size, universe,
    /// spill and memory contents, all numbers in hex.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "w={} M={} K={:#x} k={:#x} m=[", WORD_BITS, self.vm.len(), self.kmax, self.k);
        for (i, w) in self.vm.words().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{w:016x}");
        }
        s.push(']');
        s
    }
}

/// Result of [`spill_split`]: `k = (k_rest << nbits) | low bits`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpillSplit {
    pub nbits: u64,
    /// The low `nbits` bits of `k`, little-endian words.
    pub bits: Vec<u64>,
    pub k_rest: BigNat,
    pub kmax_rest: BigNat,
}

/// Extracts the low `N` bits of `k`, for the smallest `N` with
/// `ceil(K / 2^N) < hi`. When `K >= lo` and `hi >= 2 lo` the remaining
/// universe lands in `[lo, hi)`.
pub fn spill_split(k: &BigNat, kmax: &BigNat, lo: &BigNat, hi: &BigNat) -> Result<SpillSplit> {
    if kmax.is_zero() || k >= kmax {
        return Err(Error::Precondition(format!("spill {k} not below universe {kmax}")));
    }
    if hi < &(lo * 2u32) || lo.is_zero() {
        return Err(Error::Precondition("spill_split needs hi >= 2 lo >= 2".into()));
    }
    let mut n = 0u64;
    if kmax >= hi {
        // ceil(K / 2^N) < hi  iff  K <= (hi - 1) 2^N.
        let hm1 = hi - 1u32;
        n = (kmax.bits()).saturating_sub(hm1.bits());
        while n > 0 && kmax <= &(&hm1 << (n - 1)) {
            n -= 1;
        }
        while kmax > &(&hm1 << n) {
            n += 1;
        }
    }
    let kmax_rest = ceil_shift(kmax, n);
    let k_rest = k >> n;
    let low = k - (&k_rest << n);
    Ok(SpillSplit { nbits: n, bits: to_words(&low, n), k_rest, kmax_rest })
}

/// Inverse of [`spill_split`].
pub fn spill_unsplit(s: &SpillSplit) -> BigNat {
    (&s.k_rest << s.nbits) | from_words(&s.bits)
}

/// `ceil(x / 2^n)`.
pub fn ceil_shift(x: &BigNat, n: u64) -> BigNat {
    let q = x >> n;
    if (&q << n) == *x {
        q
    } else {
        q + 1u32
    }
}

/// Combines two spills as `k1 * K2 + k2` over the universe `K1 * K2`.
pub fn spill_merge(k1: &BigNat, kmax1: &BigNat, k2: &BigNat, kmax2: &BigNat) -> Result<(BigNat, BigNat)> {
    if k1 >= kmax1 || k2 >= kmax2 {
        return Err(Error::Precondition("spill_merge inputs must lie below their universes".into()));
    }
    Ok((k1 * kmax2 + k2, kmax1 * kmax2))
}

/// Inverse of [`spill_merge`] given the second universe.
pub fn spill_unmerge(k: &BigNat, kmax2: &BigNat) -> (BigNat, BigNat) {
    k.div_rem(kmax2)
}

/// The low `nbits` bits of `x` as little-endian words.
pub fn to_words(x: &BigNat, nbits: u64) -> Vec<u64> {
    let n = nbits.div_ceil(WORD_BITS as u64) as usize;
    let mut digits = x.to_u64_digits();
    digits.resize(n.max(digits.len()), 0);
    digits.truncate(n);
    if !nbits.is_multiple_of(WORD_BITS as u64) {
        if let Some(last) = digits.last_mut() {
            *last &= (1u64 << (nbits % WORD_BITS as u64)) - 1;
        }
    }
    digits
}

pub fn from_words(words: &[u64]) -> BigNat {
    BigNat::from_slice(
        &words.iter().flat_map(|&w| [w as u32, (w >> 32) as u32]).collect::<Vec<u32>>(),
    )
}

/// Which input of an [`Adapter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    One,
    Two,
}

/// A word-level operation on the adapter's output memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordOp {
    Read(usize),
    Write(usize),
    Allocate,
    Release,
}

/// Hosts two growable inputs in one output memory of size `L1 + L2`.
///
/// Input 1 occupies `[0, L1)` in order. Input 2 occupies `[L1, L)` as a
/// cyclic window: word `j` sits at `L1 + (j + rho) mod L2`. Resizing input 1
/// moves a single word and shifts `rho`. Resizing input 2 moves
/// `min(rho, L2 - rho)` words, or rotates the window back to `rho = 0` when
/// the moves paid since the last rotation would exceed `L2`.
#[derive(Clone, Debug, Default)]
pub struct Adapter {
    out: VirtualMemory,
    l1: usize,
    l2: usize,
    rho: usize,
    paid_since_rotation: usize,
    pub stats: AdapterStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdapterStats {
    pub resizes: u64,
    pub extra_ops: u64,
    pub max_extra: u64,
}

impl Adapter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.l1, self.l2)
    }

    pub fn rotation(&self) -> usize {
        self.rho
    }

    pub fn output(&self) -> &VirtualMemory {
        &self.out
    }

    pub fn translate(&self, which: Input, addr: usize) -> Result<usize> {
        match which {
            Input::One if addr < self.l1 => Ok(addr),
            Input::Two if addr < self.l2 => Ok(self.l1 + (addr + self.rho) % self.l2),
            _ => Err(Error::Precondition(format!("address {addr} out of range for {which:?}"))),
        }
    }

    pub fn read(&self, which: Input, addr: usize) -> Result<u64> {
        self.out.read(self.translate(which, addr)?)
    }

    pub fn write(&mut self, which: Input, addr: usize, v: u64) -> Result<()> {
        let a = self.translate(which, addr)?;
        self.out.write(a, v)
    }

    fn mv(&mut self, from: usize, to: usize, ops: &mut Vec<WordOp>) {
        let v = self.out.words[from];
        self.out.words[to] = v;
        ops.push(WordOp::Read(from));
        ops.push(WordOp::Write(to));
    }

    /// Rotates the input-2 window so that `rho = 0`.
    fn normalise(&mut self, ops: &mut Vec<WordOp>) {
        if self.rho == 0 || self.l2 == 0 {
            return;
        }
        let base = self.l1;
        let vals: Vec<u64> = (0..self.l2).map(|j| self.out.words[base + (j + self.rho) % self.l2]).collect();
        for (j, v) in vals.into_iter().enumerate() {
            ops.push(WordOp::Read(base + (j + self.rho) % self.l2));
            self.out.words[base + j] = v;
            ops.push(WordOp::Write(base + j));
        }
        self.rho = 0;
        self.paid_since_rotation = 0;
    }

    /// Grows or shrinks one input by a word and returns the output word
    /// operations performed, including the allocation or release.
    pub fn resize(&mut self, which: Input, grow: bool) -> Result<Vec<WordOp>> {
        let mut ops = Vec::new();
        match (which, grow) {
            (Input::One, true) => {
                self.out.allocate();
                ops.push(WordOp::Allocate);
                if self.l2 > 0 {
                    // The window's first physical slot moves to the new end.
                    self.mv(self.l1, self.l1 + self.l2, &mut ops);
                    self.rho = (self.rho + self.l2 - 1) % self.l2;
                }
                self.l1 += 1;
            }
            (Input::One, false) => {
                if self.l1 == 0 {
                    return Err(Error::Precondition("shrink of empty input 1".into()));
                }
                if self.l2 > 0 {
                    self.mv(self.l1 + self.l2 - 1, self.l1 - 1, &mut ops);
                    self.rho = (self.rho + 1) % self.l2;
                }
                self.l1 -= 1;
                self.out.release()?;
                ops.push(WordOp::Release);
            }
            (Input::Two, grow) => {
                if !grow && self.l2 == 0 {
                    return Err(Error::Precondition("shrink of empty input 2".into()));
                }
                let d = self.rho.min(self.l2 - self.rho);
                if d > 0 && self.paid_since_rotation + d > self.l2 {
                    self.normalise(&mut ops);
                }
                if grow {
                    self.out.allocate();
                    ops.push(WordOp::Allocate);
                    self.grow_two(&mut ops);
                } else {
                    self.shrink_two(&mut ops);
                    self.out.release()?;
                    ops.push(WordOp::Release);
                }
            }
        }
        let extra = ops.iter().filter(|o| matches!(o, WordOp::Read(_) | WordOp::Write(_))).count() as u64;
        self.stats.resizes += 1;
        self.stats.extra_ops += extra;
        self.stats.max_extra = self.stats.max_extra.max(extra);
        Ok(ops)
    }

    /// Inserts a slot for word `L2` just before the window's logical start.
    fn grow_two(&mut self, ops: &mut Vec<WordOp>) {
        let (base, l2, rho) = (self.l1, self.l2, self.rho);
        if rho == 0 {
            self.l2 += 1;
            return;
        }
        if rho <= l2 - rho {
            // Offset 0 moves to the new slot, offsets [1, rho) move left.
            self.mv(base, base + l2, ops);
            for off in 1..rho {
                self.mv(base + off, base + off - 1, ops);
            }
            self.paid_since_rotation += rho;
        } else {
            // Offsets [rho, L2) move right by one; the start advances.
            for off in (rho..l2).rev() {
                self.mv(base + off, base + off + 1, ops);
            }
            self.rho += 1;
            self.paid_since_rotation += l2 - rho;
        }
        self.l2 += 1;
    }

    /// Removes the slot of word `L2 - 1`, the inverse of [`Adapter::grow_two`].
    fn shrink_two(&mut self, ops: &mut Vec<WordOp>) {
        let (base, l2, rho) = (self.l1, self.l2, self.rho);
        let last = (l2 - 1 + rho) % l2;
        if last == l2 - 1 {
            self.l2 -= 1;
            return;
        }
        // The last word sits at offset rho - 1 (rho >= 1 here).
        if rho - 1 < l2 - rho {
            for off in (0..rho - 1).rev() {
                self.mv(base + off, base + off + 1, ops);
            }
            self.mv(base + l2 - 1, base, ops);
            self.paid_since_rotation += rho;
        } else {
            for off in rho..l2 {
                self.mv(base + off, base + off - 1, ops);
            }
            self.rho -= 1;
            self.paid_since_rotation += l2 - rho;
        }
        self.l2 -= 1;
        self.rho %= self.l2.max(1);
    }
}

/// Identifies a tenant of a [`ChunkAllocator`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VmId(pub usize);

#[derive(Clone, Debug, Default)]
struct Tenant {
    len: usize,
    chunks: Vec<usize>,
    live: bool,
}

/// Hosts many virtual memories in one physical word buffer split into
/// power-of-two chunks. Allocated chunks always form a prefix of the buffer;
/// freeing a chunk moves the last physical chunk into the hole.
#[derive(Clone, Debug)]
pub struct ChunkAllocator {
    chunk_bits: u64,
    chunk_words: usize,
    capacity_bits: u64,
    max_tenants: usize,
    physical: Vec<u64>,
    owner: Vec<(usize, usize)>,
    tenants: Vec<Tenant>,
    total_words: usize,
    pub chunk_moves: u64,
    pub chunk_events: u64,
}

impl ChunkAllocator {
    /// Sizes chunks for `tenants` memories holding at most `capacity_bits`
    /// bits in total: `Q` is the power of two nearest `sqrt((L/K) log2 L)`.
    pub fn new(capacity_bits: u64, tenants: usize) -> Result<Self> {
        if capacity_bits < 2 || tenants == 0 {
            return Err(Error::Precondition("allocator needs L >= 2 and K >= 1".into()));
        }
        let q = Self::chunk_bits_for(capacity_bits, tenants);
        let chunk_words = (q / WORD_BITS as u64).max(1) as usize;
        Ok(ChunkAllocator {
            chunk_bits: chunk_words as u64 * WORD_BITS as u64,
            chunk_words,
            capacity_bits,
            max_tenants: tenants,
            physical: Vec::new(),
            owner: Vec::new(),
            tenants: Vec::new(),
            total_words: 0,
            chunk_moves: 0,
            chunk_events: 0,
        })
    }

    pub fn chunk_bits_for(capacity_bits: u64, tenants: usize) -> u64 {
        let l = capacity_bits as f64;
        let target = (l / tenants as f64 * l.log2()).sqrt().max(1.0);
        1u64 << target.log2().round().max(0.0) as u32
    }

    pub fn chunk_bits(&self) -> u64 {
        self.chunk_bits
    }

    pub fn chunk_words(&self) -> usize {
        self.chunk_words
    }

    pub fn attach(&mut self) -> Result<VmId> {
        if let Some(i) = self.tenants.iter().position(|t| !t.live) {
            self.tenants[i] = Tenant { live: true, ..Tenant::default() };
            return Ok(VmId(i));
        }
        if self.tenants.len() >= self.max_tenants {
            return Err(Error::CapacityViolation(format!("more than {} tenants", self.max_tenants)));
        }
        self.tenants.push(Tenant { live: true, ..Tenant::default() });
        Ok(VmId(self.tenants.len() - 1))
    }

    /// Releases every word and chunk of `id`.
    pub fn detach(&mut self, id: VmId) -> Result<()> {
        while self.len(id)? > 0 {
            self.shrink(id)?;
        }
        while let Some(&c) = self.tenants[id.0].chunks.last() {
            self.free_chunk(id, c);
        }
        self.tenants[id.0].live = false;
        Ok(())
    }

    fn tenant(&self, id: VmId) -> Result<&Tenant> {
        self.tenants
            .get(id.0)
            .filter(|t| t.live)
            .ok_or_else(|| Error::Precondition(format!("unknown tenant {}", id.0)))
    }

    pub fn len(&self, id: VmId) -> Result<usize> {
        Ok(self.tenant(id)?.len)
    }

    fn locate(&self, id: VmId, addr: usize) -> Result<usize> {
        let t = self.tenant(id)?;
        if addr >= t.len {
            return Err(Error::Precondition(format!("address {addr} beyond tenant size {}", t.len)));
        }
        Ok(t.chunks[addr / self.chunk_words] * self.chunk_words + addr % self.chunk_words)
    }

    pub fn read(&self, id: VmId, addr: usize) -> Result<u64> {
        Ok(self.physical[self.locate(id, addr)?])
    }

    pub fn write(&mut self, id: VmId, addr: usize, v: u64) -> Result<()> {
        let p = self.locate(id, addr)?;
        self.physical[p] = v;
        Ok(())
    }

    pub fn grow(&mut self, id: VmId) -> Result<()> {
        let t = self.tenant(id)?;
        if (self.total_words as u64 + 1) * WORD_BITS as u64 > self.capacity_bits {
            return Err(Error::CapacityViolation("allocator capacity exceeded".into()));
        }
        if t.len == t.chunks.len() * self.chunk_words {
            let c = self.owner.len();
            self.physical.resize((c + 1) * self.chunk_words, 0);
            let slot = self.tenants[id.0].chunks.len();
            self.owner.push((id.0, slot));
            self.tenants[id.0].chunks.push(c);
            self.chunk_events += 1;
        }
        self.tenants[id.0].len += 1;
        self.total_words += 1;
        Ok(())
    }

    pub fn shrink(&mut self, id: VmId) -> Result<()> {
        let t = self.tenant(id)?;
        if t.len == 0 {
            return Err(Error::Precondition("shrink of an empty tenant".into()));
        }
        self.tenants[id.0].len -= 1;
        self.total_words -= 1;
        let t = &self.tenants[id.0];
        // Keep at most one empty chunk per tenant.
        let used = t.len.div_ceil(self.chunk_words);
        if t.chunks.len() >= used + 2 {
            let c = *t.chunks.last().expect("chunk");
            self.free_chunk(id, c);
        }
        Ok(())
    }

    fn free_chunk(&mut self, id: VmId, c: usize) {
        let t = &mut self.tenants[id.0];
        debug_assert_eq!(t.chunks.last(), Some(&c));
        t.chunks.pop();
        let last = self.owner.len() - 1;
        if c != last {
            let (ov, os) = self.owner[last];
            let cw = self.chunk_words;
            self.physical.copy_within(last * cw..(last + 1) * cw, c * cw);
            self.owner[c] = (ov, os);
            self.tenants[ov].chunks[os] = c;
            self.chunk_moves += 1;
        }
        self.owner.pop();
        self.physical.truncate(self.owner.len() * self.chunk_words);
        self.chunk_events += 1;
    }

    pub fn total_words(&self) -> usize {
        self.total_words
    }

    pub fn physical_chunks(&self) -> usize {
        self.owner.len()
    }

    /// Metadata at packed widths: per chunk an owner and slot index, per
    /// tenant a length and one chunk index per owned chunk.
    pub fn metadata_bits(&self) -> u64 {
        let bits = |x: u64| 64 - x.max(1).leading_zeros() as u64;
        let chunks = self.owner.len() as u64;
        let idx = bits(chunks);
        let per_chunk = bits(self.max_tenants as u64) + 2 * idx;
        let per_tenant = bits(self.capacity_bits);
        chunks * per_chunk + self.tenants.iter().filter(|t| t.live).count() as u64 * per_tenant
    }

    /// Physical bits plus metadata bits.
    pub fn footprint_bits(&self) -> u64 {
        self.owner.len() as u64 * self.chunk_bits + self.metadata_bits()
    }

    /// `sqrt(L K log2 L) + K log2 L` for this allocator's `L` and `K`.
    pub fn overhead_scale(&self) -> f64 {
        let l = self.capacity_bits as f64;
        let k = self.max_tenants as f64;
        (l * k * l.log2()).sqrt() + k * l.log2()
    }

    /// Verifies the prefix and ownership invariants.
    pub fn check_invariants(&self) -> Result<()> {
        if self.physical.len() != self.owner.len() * self.chunk_words {
            return Err(Error::Corruption("physical length is not a chunk prefix".into()));
        }
        let mut seen = vec![false; self.owner.len()];
        for (i, t) in self.tenants.iter().enumerate().filter(|(_, t)| t.live) {
            let used = t.len.div_ceil(self.chunk_words);
            if t.chunks.len() < used || t.chunks.len() > used + 1 {
                return Err(Error::Corruption(format!("tenant {i} owns {} chunks for {} words", t.chunks.len(), t.len)));
            }
            for (s, &c) in t.chunks.iter().enumerate() {
                if self.owner.get(c) != Some(&(i, s)) || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::Corruption(format!("chunk {c} ownership mismatch")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Corruption("orphan chunk".into()));
        }
        Ok(())
    }

    /// Copies a tenant's words out.
    pub fn contents(&self, id: VmId) -> Result<Vec<u64>> {
        (0..self.len(id)?).map(|a| self.read(id, a)).collect()
    }

    /// Replaces a tenant's contents, resizing one word at a time.
    pub fn store(&mut self, id: VmId, words: &[u64]) -> Result<()> {
        while self.len(id)? > words.len() {
            self.shrink(id)?;
        }
        while self.len(id)? < words.len() {
            self.grow(id)?;
        }
        for (a, &w) in words.iter().enumerate() {
            self.write(id, a, w)?;
        }
        Ok(())
    }
}

/// Number of bits in a spill universe, for reporting.
pub fn universe_bits(kmax: &BigNat) -> f64 {
    if kmax.bits() <= 52 {
        kmax.to_f64().unwrap_or(1.0).log2()
    } else {
        let shift = kmax.bits() - 52;
        (kmax >> shift).to_f64().unwrap_or(1.0).log2() + shift as f64
    }
}
