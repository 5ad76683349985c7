//! `bench`: wall time and instrumentation counters over a doubling sweep.

use std::collections::BTreeSet;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtreap::fid::Fid;
use tabtreap::Config;

use crate::report::{percentile, Report};

#[derive(Args)]
pub struct BenchArgs {
    /// Smallest n of the sweep.
    #[arg(long, default_value_t = 256)]
    pub min_n: u64,
    /// Number of doublings after `min_n`.
    #[arg(long, default_value_t = 8)]
    pub doublings: u32,
    /// Operations of each kind per size; 0 gives an empty table.
    #[arg(long, default_value_t = 2000)]
    pub ops: usize,
    /// Allowed mean rebuilt-subtree size per insertion, in units of log2 n.
    #[arg(long, default_value_t = 8.0)]
    pub rebuild_factor: f64,
}

struct Row {
    n: u64,
    query_touched_mean: f64,
    rebuilt_mean: f64,
}

pub fn run(cfg: &Config, args: &BenchArgs) -> Result<Report> {
    let mut r = Report::new("bench", cfg);
    r.put("ops_per_size", args.ops);
    if args.ops == 0 {
        r.put("rows", 0);
        return Ok(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut rebuild_ok = true;
    for d in 0..=args.doublings {
        let n = args.min_n << d;
        if n >= cfg.universe {
            break;
        }
        let mut set = BTreeSet::new();
        while (set.len() as u64) < n {
            set.insert(rng.gen_range(0..cfg.universe));
        }
        let keys: Vec<u64> = set.iter().copied().collect();
        let mut fid = Fid::from_sorted(cfg, &keys)?;
        let tag = format!("n{n}");

        let mut visited = Vec::with_capacity(2 * args.ops);
        let mut touched = Vec::with_capacity(2 * args.ops);
        let t0 = Instant::now();
        for _ in 0..args.ops {
            let (_, t) = fid.rank_traced(rng.gen_range(0..cfg.universe))?;
            visited.push(t.visited as u64);
            touched.push(t.words_read as u64);
        }
        let rank_secs = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        for _ in 0..args.ops {
            let (_, t) = fid.select_traced(rng.gen_range(0..n))?;
            visited.push(t.visited as u64);
            touched.push(t.words_read as u64);
        }
        let select_secs = t0.elapsed().as_secs_f64();

        let mut rebuilt = Vec::with_capacity(args.ops);
        let mut changed = Vec::with_capacity(args.ops);
        let mut update_secs = 0.0;
        for _ in 0..args.ops {
            let x = loop {
                let x = rng.gen_range(0..cfg.universe);
                if !set.contains(&x) {
                    break x;
                }
            };
            let t0 = Instant::now();
            let t = fid.insert(x)?;
            fid.delete(x)?;
            update_secs += t0.elapsed().as_secs_f64();
            rebuilt.push(t.rebuilt);
            changed.push(t.words_changed as u64);
        }

        visited.sort_unstable();
        touched.sort_unstable();
        rebuilt.sort_unstable();
        changed.sort_unstable();
        let mean = |v: &[u64]| v.iter().sum::<u64>() as f64 / v.len() as f64;
        let log_n = (n as f64).log2();
        let row = Row { n, query_touched_mean: mean(&touched), rebuilt_mean: mean(&rebuilt) };
        r.put(format!("{tag}.blocks"), fid.block_count());
        r.put_f(format!("{tag}.rank_ops_per_sec"), args.ops as f64 / rank_secs);
        r.put_f(format!("{tag}.select_ops_per_sec"), args.ops as f64 / select_secs);
        r.put_f(format!("{tag}.update_pairs_per_sec"), args.ops as f64 / update_secs);
        r.put(format!("{tag}.failure_blocks"), fid.failure_blocks());
        r.put_f(format!("{tag}.query_nodes_mean"), mean(&visited));
        r.put_f(format!("{tag}.query_touched_words_mean"), row.query_touched_mean);
        for (p, name) in [(0.5, "p50"), (0.9, "p90"), (0.99, "p99")] {
            r.put(format!("{tag}.query_touched_words_{name}"), percentile(&touched, p));
            r.put(format!("{tag}.words_changed_{name}"), percentile(&changed, p));
        }
        r.put_f(format!("{tag}.insert_rebuilt_mean"), row.rebuilt_mean);
        r.put_f(format!("{tag}.rebuild_budget"), args.rebuild_factor * log_n);
        rebuild_ok &= row.rebuilt_mean <= args.rebuild_factor * log_n;
        rows.push(row);
    }
    r.put("rows", rows.len());
    // Least-squares slope of log(touched words) against log(log2 n).
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|row| row.query_touched_mean > 0.0)
        .map(|row| ((row.n as f64).log2().ln(), row.query_touched_mean.ln()))
        .collect();
    if pts.len() >= 2 {
        let k = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / k, sy / k);
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = num / den;
        r.put_f("trend.touched_vs_log_n_exponent", slope);
        r.check("query_growth_subquadratic", slope < 2.0);
    }
    r.check("rebuild_size", rebuild_ok);
    Ok(r)
}
