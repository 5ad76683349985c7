//! `fuzz`: a seeded operation stream checked against a sorted-set oracle.
//!
//! On divergence the trace is cut at the failing step and then shrunk by
//! deleting chunks of operations while the replay still fails.

use std::collections::BTreeSet;
use std::fmt;

use anyhow::Result;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtreap::fid::Fid;
use tabtreap::{Config, Error};

use crate::report::Report;

#[derive(Args)]
pub struct FuzzArgs {
    /// Number of operations.
    #[arg(long, default_value_t = 100_000)]
    pub ops: usize,
    /// Canonicity check cadence in operations.
    #[arg(long, default_value_t = 1000)]
    pub check_every: usize,
    /// Flip one physical bit right after this operation.
    #[arg(long)]
    pub inject_fault: Option<usize>,
    /// Upper bound on replays spent shrinking a failing trace.
    #[arg(long, default_value_t = 300)]
    pub shrink_budget: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Insert(u64),
    Delete(u64),
    Rank(u64),
    /// Index reduced modulo the current size.
    Select(u64),
    Fault { block: usize, word: usize, bit: u32 },
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Insert(x) => write!(f, "insert {x}"),
            Op::Delete(x) => write!(f, "delete {x}"),
            Op::Rank(x) => write!(f, "rank {x}"),
            Op::Select(i) => write!(f, "select {i}"),
            Op::Fault { block, word, bit } => write!(f, "fault block={block} word={word} bit={bit}"),
        }
    }
}

pub struct Divergence {
    pub step: usize,
    pub message: String,
    pub dump: String,
}

/// Mixed workload: 40% inserts (mostly fresh keys), 25% deletes (mostly
/// present keys), 20% rank, 15% select.
pub fn generate(cfg: &Config, ops: usize, fault_at: Option<usize>) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f022);
    let mut present: Vec<u64> = Vec::new();
    let mut set = BTreeSet::new();
    let mut out = Vec::with_capacity(ops + 1);
    for step in 0..ops {
        let roll = rng.gen_range(0..100);
        let op = if roll < 40 || present.is_empty() {
            let x = rng.gen_range(0..cfg.universe);
            if set.insert(x) {
                present.push(x);
            }
            Op::Insert(x)
        } else if roll < 65 {
            if rng.gen_bool(0.95) {
                let i = rng.gen_range(0..present.len());
                let x = present.swap_remove(i);
                set.remove(&x);
                Op::Delete(x)
            } else {
                let x = rng.gen_range(0..cfg.universe);
                if set.remove(&x) {
                    present.retain(|&k| k != x);
                }
                Op::Delete(x)
            }
        } else if roll < 85 {
            Op::Rank(rng.gen_range(0..cfg.universe))
        } else {
            Op::Select(rng.gen())
        };
        out.push(op);
        if fault_at == Some(step) {
            out.push(Op::Fault { block: rng.gen(), word: rng.gen(), bit: rng.gen_range(0..64) });
        }
    }
    out
}

/// Replays `ops`, comparing every answer with the oracle. Canonicity is
/// checked every `check_every` operations and once at the end.
pub fn replay(cfg: &Config, ops: &[Op], check_every: usize) -> std::result::Result<Fid, Divergence> {
    let fail = |step: usize, message: String, fid: &Fid| Divergence { step, message, dump: dump(fid) };
    let mut fid = Fid::new(cfg).map_err(|e| Divergence { step: 0, message: e.to_string(), dump: String::new() })?;
    // Sorted vector: rank and select by index, updates by memmove.
    let mut oracle: Vec<u64> = Vec::new();
    for (step, &op) in ops.iter().enumerate() {
        let verdict: std::result::Result<(), String> = match op {
            Op::Insert(x) => match (fid.insert(x), sorted_insert(&mut oracle, x)) {
                (Ok(_), true) | (Err(Error::Precondition(_)), false) => Ok(()),
                (r, fresh) => Err(format!("insert {x}: got {:?}, oracle fresh={fresh}", r.map(|_| ()))),
            },
            Op::Delete(x) => match (fid.delete(x), sorted_remove(&mut oracle, x)) {
                (Ok(_), true) | (Err(Error::Precondition(_)), false) => Ok(()),
                (r, had) => Err(format!("delete {x}: got {:?}, oracle had={had}", r.map(|_| ()))),
            },
            Op::Rank(x) => {
                let want = oracle.partition_point(|&k| k < x) as u64;
                match fid.rank(x) {
                    Ok(got) if got == want => Ok(()),
                    other => Err(format!("rank {x}: got {other:?}, want {want}")),
                }
            }
            Op::Select(raw) => {
                if oracle.is_empty() {
                    match fid.select(0) {
                        Err(Error::Domain(_)) => Ok(()),
                        other => Err(format!("select on empty: got {other:?}")),
                    }
                } else {
                    let i = raw % oracle.len() as u64;
                    let want = oracle[i as usize];
                    match fid.select(i) {
                        Ok(got) if got == want => Ok(()),
                        other => Err(format!("select {i}: got {other:?}, want {want}")),
                    }
                }
            }
            Op::Fault { block, word, bit } => fid.flip_physical_bit(block, word, bit).map(|_| ()).map_err(|e| e.to_string()),
        };
        if let Err(m) = verdict {
            return Err(fail(step, m, &fid));
        }
        if check_every > 0 && (step + 1) % check_every == 0 {
            if let Err(e) = fid.check_invariants(true) {
                return Err(fail(step, format!("canonicity check: {e}"), &fid));
            }
        }
    }
    if let Err(e) = fid.check_invariants(true) {
        return Err(fail(ops.len().saturating_sub(1), format!("final canonicity check: {e}"), &fid));
    }
    if fid.len() != oracle.len() as u64 {
        return Err(fail(ops.len(), "size disagrees with oracle".into(), &fid));
    }
    Ok(fid)
}

fn sorted_insert(v: &mut Vec<u64>, x: u64) -> bool {
    match v.binary_search(&x) {
        Ok(_) => false,
        Err(i) => {
            v.insert(i, x);
            true
        }
    }
}

fn sorted_remove(v: &mut Vec<u64>, x: u64) -> bool {
    match v.binary_search(&x) {
        Ok(i) => {
            v.remove(i);
            true
        }
        Err(_) => false,
    }
}

fn dump(fid: &Fid) -> String {
    let mut s = format!("n={} blocks={} B={}", fid.len(), fid.block_count(), fid.block_param());
    for i in 0..fid.block_count().min(4) {
        if let Ok(d) = fid.dump_block(i) {
            s.push('\n');
            s.push_str(&d);
        }
    }
    s
}

/// Deletes chunks of halving size while the replay keeps failing.
pub fn shrink(cfg: &Config, mut ops: Vec<Op>, budget: usize) -> Vec<Op> {
    let mut replays = 0;
    let mut chunk = ops.len().div_ceil(2).max(1);
    loop {
        let mut i = 0;
        while i < ops.len() && replays < budget {
            let mut trial = ops.clone();
            trial.drain(i..(i + chunk).min(ops.len()));
            replays += 1;
            if !trial.is_empty() && replay(cfg, &trial, 0).is_err() {
                ops = trial;
            } else {
                i += chunk;
            }
        }
        if chunk == 1 || replays >= budget {
            return ops;
        }
        chunk = chunk.div_ceil(2);
    }
}

pub fn run(cfg: &Config, args: &FuzzArgs) -> Result<Report> {
    let ops = generate(cfg, args.ops, args.inject_fault);
    let mut r = Report::new("fuzz", cfg);
    r.put("ops", args.ops);
    r.put("check_every", args.check_every);
    r.put("fault_injected_after", args.inject_fault.map_or("none".to_string(), |s| s.to_string()));
    match replay(cfg, &ops, args.check_every) {
        Ok(fid) => {
            r.put("final_n", fid.len());
            r.put("blocks", fid.block_count());
            r.put("splits", fid.stats.splits);
            r.put("merges", fid.stats.merges);
            r.put("rebuilds", fid.stats.rebuilds);
            r.check("oracle", true);
        }
        Err(d) => {
            r.put("divergence_step", d.step);
            r.put("divergence", d.message.clone());
            let prefix = ops[..=d.step.min(ops.len() - 1)].to_vec();
            let small = shrink(cfg, prefix, args.shrink_budget);
            r.put("counterexample_len", small.len());
            let trace: Vec<String> = small.iter().map(|o| o.to_string()).collect();
            r.put("counterexample", trace.join("; "));
            for (i, line) in d.dump.lines().enumerate() {
                r.put(format!("state[{i}]"), line);
            }
            r.check("oracle", false);
        }
    }
    Ok(r)
}
