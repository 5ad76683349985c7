//! The top-level dictionary: the universe is cut into intervals holding `B..4B`
//! keys each, and every interval is one compressed treap over relative keys.
//!
//! Block root words live in one shared [`ChunkAllocator`]; the block
//! directory is a sorted vector of interval starts with a Fenwick tree of key
//! counts. All blocks share one [`TreapCodec`], so lookup tables are built
//! once per block parameter.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::config::Config;
use crate::ctreap::{CTreap, Mode, OpTrace, TreapCodec, TreapParams, HEADER_WORDS};
use crate::error::{Error, Result};
use crate::numeric::{binom_u64, ceil_log2, log2_cost, BigNat, Rounding};
use crate::vm::{ChunkAllocator, VmId};
use crate::weight::WeightFn;
use crate::WORD_BITS;

const W: u64 = WORD_BITS as u64;
const SNAPSHOT_MAGIC: &[u8; 8] = b"TABTRP01";

/// Default block parameter: `max(8, 2^ceil((log2 n / log2 w)^(1/3)))` in `[8, 4096]`.
pub fn default_block(n: u64) -> u64 {
    let ln = (n.max(2) as f64).log2();
    let e = (ln / (W as f64).log2()).cbrt().ceil() as u32;
    (1u64 << e.min(12)).clamp(8, 4096)
}

/// Prefix sums over block key counts.
#[derive(Clone, Debug, Default)]
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn from_counts(counts: &[u64]) -> Self {
        let mut tree = vec![0u64; counts.len() + 1];
        for (i, &c) in counts.iter().enumerate() {
            let mut j = i + 1;
            while j < tree.len() {
                tree[j] += c;
                j += j & j.wrapping_neg();
            }
        }
        Fenwick { tree }
    }

    fn add(&mut self, i: usize, delta: i64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] = self.tree[j].wrapping_add(delta as u64);
            j += j & j.wrapping_neg();
        }
    }

    /// Sum of counts before block `i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut j = i;
        let mut s = 0;
        while j > 0 {
            s += self.tree[j];
            j &= j - 1;
        }
        s
    }

    /// Block holding the `i`-th key and the number of keys before it.
    fn find(&self, mut i: u64) -> (usize, u64) {
        let n = self.tree.len() - 1;
        let mut pos = 0usize;
        let mut before = 0u64;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= i {
                pos = next;
                i -= self.tree[next];
                before += self.tree[next];
            }
            step >>= 1;
        }
        (pos, before)
    }
}

#[derive(Clone, Debug)]
struct Block {
    start: u64,
    end: u64,
    treap: CTreap,
    vm: VmId,
}

/// Counters of structural maintenance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FidStats {
    pub splits: u64,
    pub merges: u64,
    /// Merges whose result exceeded `4B` and was split again.
    pub resplits: u64,
    pub rebuilds: u64,
    /// Largest block size seen right after a merge.
    pub max_merged: u64,
}

/// Measured bits per layer.
#[derive(Clone, Debug)]
pub struct SpaceReport {
    pub n: u64,
    pub universe: u64,
    pub block_param: u64,
    pub blocks: usize,
    pub failure_blocks: usize,
    /// `w M + log2 K` (normal) or payload bits (failure), summed over blocks.
    pub payload_bits: f64,
    pub header_bits: u64,
    /// Whole bits used to store every block spill.
    pub spill_bits: u64,
    /// Allocator footprint minus the live words it hosts.
    pub allocator_overhead_bits: u64,
    /// Allocator overhead bound `4 (sqrt(L K log2 L) + K log2 L)`.
    pub allocator_bound_bits: f64,
    pub directory_bits: u64,
    /// Entries in the shared lookup tables (not charged per instance).
    pub lookup_tables: usize,
    pub total_bits: f64,
    /// `log2 C(U, n)`.
    pub optimum_bits: f64,
    /// `Σ log2 C(U_i, n_i)`.
    pub block_optimum_bits: f64,
}

impl SpaceReport {
    pub fn redundancy(&self) -> f64 {
        self.total_bits - self.optimum_bits
    }

    /// `log2 C(U, n) - Σ log2 C(U_i, n_i)`; nonnegative.
    pub fn superadditivity_margin(&self) -> f64 {
        self.optimum_bits - self.block_optimum_bits
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "U = {}", self.universe);
        let _ = writeln!(s, "B = {}", self.block_param);
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "failure_blocks = {}", self.failure_blocks);
        let _ = writeln!(s, "payload_bits = {:.3}", self.payload_bits);
        let _ = writeln!(s, "header_bits = {}", self.header_bits);
        let _ = writeln!(s, "spill_bits = {}", self.spill_bits);
        let _ = writeln!(s, "allocator_overhead_bits = {}", self.allocator_overhead_bits);
        let _ = writeln!(s, "allocator_bound_bits = {:.1}", self.allocator_bound_bits);
        let _ = writeln!(s, "directory_bits = {}", self.directory_bits);
        let _ = writeln!(s, "lookup_table_entries = {}", self.lookup_tables);
        let _ = writeln!(s, "total_bits = {:.3}", self.total_bits);
        let _ = writeln!(s, "optimum_bits = {:.3}", self.optimum_bits);
        let _ = writeln!(s, "redundancy_bits = {:.3}", self.redundancy());
        let _ = writeln!(s, "superadditivity_margin = {:.3}", self.superadditivity_margin());
        s
    }
}

/// The block-partitioned dynamic dictionary.
#[derive(Debug)]
pub struct Fid {
    cfg: Config,
    h: Arc<WeightFn>,
    codecs: HashMap<u64, Arc<TreapCodec>>,
    codec: Arc<TreapCodec>,
    b: u64,
    regime: (u64, u64),
    blocks: Vec<Block>,
    starts: Vec<u64>,
    counts: Fenwick,
    alloc: ChunkAllocator,
    n: u64,
    pub stats: FidStats,
}

impl Fid {
    pub fn new(cfg: &Config) -> Result<Self> {
        Self::from_sorted(cfg, &[])
    }

    /// Bulk load from strictly increasing keys.
    pub fn from_sorted(cfg: &Config, keys: &[u64]) -> Result<Self> {
        cfg.validate()?;
        if keys.windows(2).any(|w| w[0] >= w[1]) || keys.last().is_some_and(|&x| x >= cfg.universe) {
            return Err(Error::Precondition("bulk load needs strictly increasing keys below U".into()));
        }
        let h = Arc::new(WeightFn::new(cfg.weight_range, cfg.a_count(), cfg.seed, cfg.universe)?);
        let b = cfg.block.unwrap_or_else(|| default_block(keys.len() as u64));
        let codec = Arc::new(TreapCodec::new(h.clone(), TreapParams::from_config(cfg, 5 * b))?);
        let mut fid = Fid {
            cfg: cfg.clone(),
            h,
            codecs: HashMap::from([(b, codec.clone())]),
            codec,
            b,
            regime: (0, 0),
            blocks: Vec::new(),
            starts: Vec::new(),
            counts: Fenwick::default(),
            alloc: ChunkAllocator::new(2, 1)?,
            n: 0,
            stats: FidStats::default(),
        };
        fid.rebuild_from(keys)?;
        fid.stats.rebuilds = 0;
        Ok(fid)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn universe(&self) -> u64 {
        self.cfg.universe
    }

    pub fn block_param(&self) -> u64 {
        self.b
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn codec(&self) -> &Arc<TreapCodec> {
        &self.codec
    }

    /// `(start, end, size)` of every block.
    pub fn block_layout(&self) -> Vec<(u64, u64, u64)> {
        self.blocks.iter().map(|b| (b.start, b.end, b.treap.len())).collect()
    }

    pub fn failure_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.treap.mode() == Mode::Failure).count()
    }

    /// All keys in increasing order.
    pub fn keys(&self) -> Result<Vec<u64>> {
        let mut out = Vec::with_capacity(self.n as usize);
        for b in &self.blocks {
            out.extend(b.treap.keys()?.into_iter().map(|k| k + b.start));
        }
        Ok(out)
    }

    fn codec_for(&mut self, b: u64) -> Result<Arc<TreapCodec>> {
        if let Some(c) = self.codecs.get(&b) {
            return Ok(c.clone());
        }
        let c = Arc::new(TreapCodec::new(self.h.clone(), TreapParams::from_config(&self.cfg, 5 * b))?);
        self.codecs.insert(b, c.clone());
        Ok(c)
    }

    /// Picks the codec, regime window and a fresh allocator sized for `n` keys.
    fn enter_regime(&mut self, n: u64, b: u64) -> Result<()> {
        self.codec = self.codec_for(b)?;
        self.b = b;
        self.regime = if n < 16 { (0, 32.max(2 * n)) } else { (n / 2, 2 * n) };
        let tenants = (2 * self.regime.1 / b + 4) as usize;
        let key_bits = ceil_log2(&BigNat::from(self.cfg.universe)).max(1);
        let words_per_block = (5 * b * key_bits).div_ceil(W) + 1;
        self.alloc = ChunkAllocator::new((tenants as u64 * words_per_block * W).max(1 << 12), tenants)?;
        Ok(())
    }

    /// Re-partitions everything for the current `n` with a fresh allocator.
    fn rebuild_from(&mut self, keys: &[u64]) -> Result<()> {
        let n = keys.len() as u64;
        self.enter_regime(n, self.cfg.block.unwrap_or_else(|| default_block(n)))?;
        let b = self.b;
        let groups = (n / (2 * b)).max(1) as usize;
        let mut blocks = Vec::with_capacity(groups);
        let mut cut = 0usize;
        for g in 0..groups {
            let next = if g + 1 == groups { keys.len() } else { (keys.len() * (g + 1)) / groups };
            let start = if g == 0 { 0 } else { keys[cut] };
            let end = if g + 1 == groups { self.cfg.universe } else { keys[next] };
            blocks.push(self.make_block(start, end, &keys[cut..next])?);
            cut = next;
        }
        self.blocks = blocks;
        self.n = n;
        self.reindex();
        self.stats.rebuilds += 1;
        Ok(())
    }

    fn make_block(&mut self, start: u64, end: u64, keys: &[u64]) -> Result<Block> {
        let rel: Vec<u64> = keys.iter().map(|&k| k - start).collect();
        let treap = CTreap::from_keys(self.codec.clone(), end - start, &rel)?;
        let vm = self.alloc.attach()?;
        self.alloc.store(vm, treap.root().vm.words())?;
        Ok(Block { start, end, treap, vm })
    }

    fn drop_block(&mut self, blk: &Block) -> Result<()> {
        self.alloc.detach(blk.vm)
    }

    fn reindex(&mut self) {
        self.starts = self.blocks.iter().map(|b| b.start).collect();
        let counts: Vec<u64> = self.blocks.iter().map(|b| b.treap.len()).collect();
        self.counts = Fenwick::from_counts(&counts);
    }

    fn block_of(&self, x: u64) -> usize {
        self.starts.partition_point(|&s| s <= x) - 1
    }

    /// Number of keys `< x`.
    pub fn rank(&self, x: u64) -> Result<u64> {
        self.rank_traced(x).map(|r| r.0)
    }

    pub fn rank_traced(&self, x: u64) -> Result<(u64, OpTrace)> {
        if x >= self.cfg.universe {
            return Ok((self.n, OpTrace::default()));
        }
        let i = self.block_of(x);
        let blk = &self.blocks[i];
        let (r, t) = blk.treap.rank_traced(x - blk.start)?;
        Ok((self.counts.prefix(i) + r, t))
    }

    /// The `i`-th smallest key (0-based).
    pub fn select(&self, i: u64) -> Result<u64> {
        self.select_traced(i).map(|r| r.0)
    }

    pub fn select_traced(&self, i: u64) -> Result<(u64, OpTrace)> {
        if i >= self.n {
            return Err(Error::Domain(format!("select({i}) on {} keys", self.n)));
        }
        let (j, before) = self.counts.find(i);
        let blk = &self.blocks[j];
        let (k, t) = blk.treap.select_traced(i - before)?;
        Ok((blk.start + k, t))
    }

    pub fn contains(&self, x: u64) -> Result<bool> {
        if x >= self.cfg.universe {
            return Ok(false);
        }
        let blk = &self.blocks[self.block_of(x)];
        blk.treap.contains(x - blk.start)
    }

    fn sync_block(&mut self, i: usize) -> Result<()> {
        let blk = &self.blocks[i];
        let (vm, words) = (blk.vm, blk.treap.root().vm.words().to_vec());
        self.alloc.store(vm, &words)
    }

    pub fn insert(&mut self, x: u64) -> Result<OpTrace> {
        if x >= self.cfg.universe {
            return Err(Error::Domain(format!("key {x} outside [0, {})", self.cfg.universe)));
        }
        let i = self.block_of(x);
        let start = self.blocks[i].start;
        let trace = self.blocks[i].treap.insert(x - start)?;
        self.sync_block(i)?;
        self.counts.add(i, 1);
        self.n += 1;
        if self.blocks[i].treap.len() > 4 * self.b {
            self.split(i)?;
        }
        self.maybe_rebuild()?;
        Ok(trace)
    }

    pub fn delete(&mut self, x: u64) -> Result<OpTrace> {
        if x >= self.cfg.universe {
            return Err(Error::Precondition(format!("key {x} not present")));
        }
        let i = self.block_of(x);
        let start = self.blocks[i].start;
        let trace = self.blocks[i].treap.delete(x - start)?;
        self.sync_block(i)?;
        self.counts.add(i, -1);
        self.n -= 1;
        if self.blocks[i].treap.len() < self.b && self.blocks.len() > 1 {
            self.merge(i)?;
        }
        self.maybe_rebuild()?;
        Ok(trace)
    }

    fn maybe_rebuild(&mut self) -> Result<()> {
        if self.n < self.regime.0 || self.n > self.regime.1 {
            let keys = self.keys()?;
            for blk in std::mem::take(&mut self.blocks) {
                self.drop_block(&blk)?;
            }
            self.rebuild_from(&keys)?;
        }
        Ok(())
    }

    fn block_keys(&self, i: usize) -> Result<Vec<u64>> {
        let b = &self.blocks[i];
        Ok(b.treap.keys()?.into_iter().map(|k| k + b.start).collect())
    }

    /// Replaces blocks `range` by blocks over `keys` cut at `cuts` (indices
    /// into `keys` where a new block starts).
    fn replace(&mut self, range: std::ops::Range<usize>, keys: &[u64], cuts: &[usize]) -> Result<()> {
        let start = self.blocks[range.start].start;
        let end = self.blocks[range.end - 1].end;
        let old: Vec<Block> = self.blocks.drain(range.clone()).collect();
        for blk in &old {
            self.drop_block(blk)?;
        }
        let mut bounds = vec![0usize];
        bounds.extend_from_slice(cuts);
        bounds.push(keys.len());
        let mut new = Vec::with_capacity(bounds.len() - 1);
        for (g, w) in bounds.windows(2).enumerate() {
            let s = if g == 0 { start } else { keys[w[0]] };
            let e = if g + 2 == bounds.len() { end } else { keys[w[1]] };
            new.push(self.make_block(s, e, &keys[w[0]..w[1]])?);
        }
        self.blocks.splice(range.start..range.start, new);
        self.reindex();
        Ok(())
    }

    fn split(&mut self, i: usize) -> Result<()> {
        let keys = self.block_keys(i)?;
        self.replace(i..i + 1, &keys, &[keys.len() / 2])?;
        self.stats.splits += 1;
        Ok(())
    }

    fn merge(&mut self, i: usize) -> Result<()> {
        let (lo, hi) = if i + 1 < self.blocks.len() { (i, i + 1) } else { (i - 1, i) };
        let mut keys = self.block_keys(lo)?;
        keys.extend(self.block_keys(hi)?);
        let merged = keys.len() as u64;
        self.stats.merges += 1;
        self.stats.max_merged = self.stats.max_merged.max(merged);
        if merged > 4 * self.b {
            self.stats.resplits += 1;
            self.replace(lo..hi + 1, &keys, &[keys.len() / 2])
        } else {
            self.replace(lo..hi + 1, &keys, &[])
        }
    }

    /// Header and root memory of block `i`, plus its physical copy.
    pub fn dump_block(&self, i: usize) -> Result<String> {
        let b = &self.blocks[i];
        Ok(format!(
            "block {i} [{}, {}) n={} mode={:?}\n  logical: {}\n  physical: {:x?}",
            b.start,
            b.end,
            b.treap.len(),
            b.treap.mode(),
            b.treap.root().dump(),
            self.alloc.contents(b.vm)?
        ))
    }

    /// Flips one bit of the physical copy of a block's root memory. Returns
    /// false if the block hosts no words. Used to test the detectors.
    pub fn flip_physical_bit(&mut self, block: usize, word: usize, bit: u32) -> Result<bool> {
        let vm = self.blocks[block % self.blocks.len()].vm;
        let len = self.alloc.len(vm)?;
        if len == 0 {
            return Ok(false);
        }
        let addr = word % len;
        let v = self.alloc.read(vm, addr)?;
        self.alloc.write(vm, addr, v ^ (1u64 << (bit % 64)))?;
        Ok(true)
    }

    /// Partition invariants, allocator mirroring and per-block canonicity.
    pub fn check_invariants(&self, canonical: bool) -> Result<()> {
        let mut expect = 0u64;
        let mut total = 0u64;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.start != expect || b.end <= b.start {
                return Err(Error::Corruption(format!("block {i} does not continue the partition")));
            }
            expect = b.end;
            let size = b.treap.len();
            if self.blocks.len() > 1 && (size < self.b || size > 4 * self.b) {
                return Err(Error::Corruption(format!("block {i} holds {size} keys outside [B, 4B]")));
            }
            if self.counts.prefix(i + 1) - self.counts.prefix(i) != size {
                return Err(Error::Corruption(format!("count index disagrees at block {i}")));
            }
            if self.alloc.contents(b.vm)? != b.treap.root().vm.words() {
                return Err(Error::Corruption(format!("allocator copy of block {i} is stale")));
            }
            if canonical && !b.treap.is_canonical()? {
                return Err(Error::Corruption(format!("block {i} is not canonical")));
            }
            total += size;
        }
        if expect != self.cfg.universe || total != self.n {
            return Err(Error::Corruption("blocks do not cover the universe".into()));
        }
        self.alloc.check_invariants()
    }

    pub fn space_report(&self) -> Result<SpaceReport> {
        let frac = self.cfg.frac_bits;
        let mut payload = 0.0;
        let mut spill_bits = 0u64;
        let mut block_opt = 0.0;
        for b in &self.blocks {
            let s = b.treap.space()?;
            payload += s.payload_bits;
            spill_bits += ceil_log2(&b.treap.root().kmax);
            block_opt += s.optimum_bits;
        }
        let k = self.blocks.len() as u64;
        let header_bits = k * HEADER_WORDS as u64 * W;
        let live = self.alloc.total_words() as u64 * W;
        let allocator_overhead_bits = self.alloc.footprint_bits() - live;
        let bits = |x: u64| ceil_log2(&BigNat::from(x + 1)).max(1);
        let directory_bits = k * (bits(self.cfg.universe) + bits(self.n) + bits(k));
        let optimum_bits = log2_cost(&binom_u64(self.cfg.universe, self.n), Rounding::Down, frac)?.to_f64();
        let lookup_tables = self.codec.rank_encoder().table_count()
            + self.codec.weight_encoder().table_count()
            + self.codec.registry().instantiated();
        let total_bits = payload
            + (spill_bits as f64 - self.spill_log_sum()?)
            + header_bits as f64
            + allocator_overhead_bits as f64
            + directory_bits as f64;
        Ok(SpaceReport {
            n: self.n,
            universe: self.cfg.universe,
            block_param: self.b,
            blocks: self.blocks.len(),
            failure_blocks: self.failure_blocks(),
            payload_bits: payload,
            header_bits,
            spill_bits,
            allocator_overhead_bits,
            allocator_bound_bits: 4.0 * self.alloc.overhead_scale(),
            directory_bits,
            lookup_tables,
            total_bits,
            optimum_bits,
            block_optimum_bits: block_opt,
        })
    }

    /// `Σ log2 K` over normal-mode blocks: the fractional spill part already
    /// counted in the payload.
    fn spill_log_sum(&self) -> Result<f64> {
        let frac = self.cfg.frac_bits;
        let mut s = 0.0;
        for b in self.blocks.iter().filter(|b| b.treap.mode() == Mode::Normal) {
            s += log2_cost(&b.treap.root().kmax, Rounding::Up, frac)?.to_f64();
        }
        Ok(s)
    }

    /// Serialises the whole dictionary with its config hash.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        let hash = self.cfg.hash();
        out.extend_from_slice(&(hash.len() as u64).to_le_bytes());
        out.extend_from_slice(hash.as_bytes());
        for v in [self.cfg.universe, self.n, self.b, self.blocks.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.blocks {
            let bytes = b.treap.to_bytes();
            for v in [b.start, b.end, bytes.len() as u64] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&bytes);
        }
        out
    }

    /// Restores a snapshot written under the same configuration; every block
    /// must decode to its canonical encoding.
    pub fn load(cfg: &Config, bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + len).ok_or_else(|| Error::Corruption("truncated snapshot".into()))?;
            pos += len;
            Ok(s)
        };
        if take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Corruption("not a snapshot".into()));
        }
        let word = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("eight bytes"));
        let hlen = word(take(8)?) as usize;
        if take(hlen)? != cfg.hash().as_bytes() {
            return Err(Error::Config("snapshot was written under a different configuration".into()));
        }
        let (u, n, b, count) = (word(take(8)?), word(take(8)?), word(take(8)?), word(take(8)?));
        if u != cfg.universe {
            return Err(Error::Corruption("snapshot universe mismatch".into()));
        }
        if b == 0 || cfg.block.is_some_and(|cb| cb != b) {
            return Err(Error::Corruption("snapshot block parameter mismatch".into()));
        }
        let mut fid = Fid::new(cfg)?;
        fid.enter_regime(n, b)?;
        let mut blocks = Vec::with_capacity(count as usize);
        let mut expect = 0u64;
        for _ in 0..count {
            let (start, end, len) = (word(take(8)?), word(take(8)?), word(take(8)?));
            let treap = CTreap::from_bytes(fid.codec.clone(), take(len as usize)?)?;
            if start != expect || end <= start || treap.universe() != end - start {
                return Err(Error::Corruption("snapshot blocks do not partition the universe".into()));
            }
            expect = end;
            let vm = fid.alloc.attach()?;
            fid.alloc.store(vm, treap.root().vm.words())?;
            blocks.push(Block { start, end, treap, vm });
        }
        if pos != bytes.len() {
            return Err(Error::Corruption("trailing bytes in snapshot".into()));
        }
        fid.blocks = blocks;
        fid.n = n;
        fid.reindex();
        fid.check_invariants(false)?;
        Ok(fid)
    }
}
