//! Acceptance suite: one line per criterion, pinned tolerances.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! exit status is nonzero only with `ACCEPTANCE_STRICT=1`; otherwise the
//! report itself is the verdict.

mod common;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtreap::coding::PrefixOffsetTable;
use tabtreap::ctreap::{lex_bits, lex_rank, lex_unrank, CTreap, Mode, TreapCodec};
use tabtreap::fid::Fid;
use tabtreap::info::{check_failure_predicate, dist_weight_td, DistRegistry, InfoModel};
use tabtreap::numeric::{binom_u64, ceil_log2};
use tabtreap::reftreap::RefTreap;
use tabtreap::vm::ChunkAllocator;
use tabtreap::weight::WeightFn;
use tabtreap::{Config, Error};

// Tolerances from the acceptance contract.
const OPS: usize = 1_000_000;
const CHECK_EVERY: usize = 1_000;
const TIME_BUDGET_SECS: f64 = 600.0;
const CORPUS_SETS: usize = 1_000;
const DELTA_SLACK: f64 = 0.5;
const WORD_ALLOWANCE: f64 = 16.0 * 64.0;
const UNIFORM_EXCESS: f64 = 1.0 / 256.0;
const PREFIX_OFFSET_Z_MAX: u64 = 4096;
const LEX_U_MAX: u64 = 256;
const LEX_N_MAX: u64 = 4;
const FAILURE_RATE_W64: f64 = 0.05;
const DEPTH_FACTOR: f64 = 5.0;
const REBUILD_FACTOR: f64 = 8.0;
const ALLOC_OPS: usize = 100_000;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { ok, detail }
}

fn big(x: u64) -> BigUint {
    BigUint::from(x)
}

fn log2_ratio(num: &BigUint, den: &BigUint) -> f64 {
    let shift = den.bits().max(num.bits()).saturating_sub(900);
    let (n, d) = (num >> shift, den >> shift);
    let f = |x: &BigUint| x.to_string().parse::<f64>().unwrap_or(f64::INFINITY);
    f(&n).log2() - f(&d).log2()
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

/// Criteria 1 and 2: a mixed workload on the top-level dictionary against a
/// sorted-vector oracle, with a full canonicity check every `CHECK_EVERY`
/// operations.
fn oracle_and_canonicity() -> (Outcome, Outcome) {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut fid = Fid::new(&cfg).unwrap();
    let mut oracle: Vec<u64> = Vec::new();
    let mut mismatches = 0usize;
    let mut first_mismatch = String::new();
    let mut checks = 0usize;
    let mut bad_checks = 0usize;
    let mut check_secs = 0.0;
    let start = Instant::now();
    for step in 0..OPS {
        let roll = rng.gen_range(0..100);
        let verdict: Result<(), String> = if roll < 40 || oracle.is_empty() {
            let x = rng.gen_range(0..cfg.universe);
            let fresh = sorted_insert(&mut oracle, x);
            match (fid.insert(x), fresh) {
                (Ok(_), true) | (Err(Error::Precondition(_)), false) => Ok(()),
                (r, _) => Err(format!("insert {x}: {:?}", r.map(|_| ()))),
            }
        } else if roll < 65 {
            let i = rng.gen_range(0..oracle.len());
            let x = oracle.remove(i);
            fid.delete(x).map(|_| ()).map_err(|e| format!("delete {x}: {e}"))
        } else if roll < 85 {
            let x = rng.gen_range(0..cfg.universe);
            let want = oracle.partition_point(|&k| k < x) as u64;
            match fid.rank(x) {
                Ok(r) if r == want => Ok(()),
                r => Err(format!("rank {x}: {r:?} want {want}")),
            }
        } else {
            let i = rng.gen_range(0..oracle.len());
            match fid.select(i as u64) {
                Ok(k) if k == oracle[i] => Ok(()),
                r => Err(format!("select {i}: {r:?} want {}", oracle[i])),
            }
        };
        if let Err(m) = verdict {
            mismatches += 1;
            if first_mismatch.is_empty() {
                first_mismatch = format!("step {step}: {m}");
            }
        }
        if (step + 1) % CHECK_EVERY == 0 {
            let t = Instant::now();
            checks += 1;
            if fid.check_invariants(true).is_err() {
                bad_checks += 1;
            }
            check_secs += t.elapsed().as_secs_f64();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let final_keys_ok = fid.keys().map(|k| k == oracle).unwrap_or(false);
    let c1 = outcome(
        mismatches == 0 && final_keys_ok && secs <= TIME_BUDGET_SECS,
        format!(
            "{OPS} ops, mismatches={mismatches}{} final_n={} blocks={} splits={} merges={} rebuilds={} \
             wall={secs:.1}s (checks {check_secs:.1}s) budget={TIME_BUDGET_SECS}s",
            if first_mismatch.is_empty() { String::new() } else { format!(" first=[{first_mismatch}]") },
            fid.len(),
            fid.block_count(),
            fid.stats.splits,
            fid.stats.merges,
            fid.stats.rebuilds,
        ),
    );
    let c2 = outcome(bad_checks == 0 && checks == OPS / CHECK_EVERY, format!("{checks} per-block checks, {bad_checks} differ"));
    (c1, c2)
}

struct Corpus {
    codec: Arc<TreapCodec>,
    sets: Vec<Vec<u64>>,
}

/// `CORPUS_SETS` uniform non-failure sets with sizes cycling through 1..=nmax.
fn corpus() -> Corpus {
    let cfg = Config::default();
    let codec = Arc::new(TreapCodec::from_config(&cfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let sets = (0..CORPUS_SETS)
        .map(|i| {
            let n = 1 + i % cfg.nmax as usize;
            common::non_failure_set(codec.weight_fn(), n, cfg.t_fail(), 0, cfg.universe, &mut rng)
        })
        .collect();
    Corpus { codec, sets }
}

/// Criterion 3: every instantiated encoder member, plus every uniform node.
fn encoder_redundancy(c: &Corpus) -> Outcome {
    let mut uniform_worst = f64::NEG_INFINITY;
    let mut uniform_nodes = 0usize;
    for keys in &c.sets {
        let t = CTreap::from_keys(c.codec.clone(), 1 << 20, keys).unwrap();
        for node in t.node_spaces().unwrap() {
            if let Some(u) = node.uniform_excess {
                uniform_worst = uniform_worst.max(u);
                uniform_nodes += 1;
            }
        }
    }
    let mut members = 0usize;
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for enc in [c.codec.rank_encoder(), c.codec.weight_encoder()] {
        let bound = enc.excess_bound();
        for key in enc.keys() {
            let a = enc.audit(&key).unwrap();
            members += 1;
            worst = worst.max(a.excess.to_f64());
            if a.excess > bound {
                violations += 1;
            }
        }
    }
    let q = Config::default().q;
    outcome(
        violations == 0 && members > 0 && uniform_worst <= UNIFORM_EXCESS,
        format!(
            "{members} members, {violations} over 7/q={:.5}, worst={worst:.5}; uniform nodes={uniform_nodes} worst excess={uniform_worst:.6} (<= 2^-8)",
            7.0 / q as f64
        ),
    )
}

/// Criterion 4: exhaustive round trips of the prefix-offset coder.
fn prefix_offset_core() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e55);
    let mut families = 0usize;
    let mut inputs = 0u64;
    let mut failures = Vec::new();
    for q in [10u64, 256] {
        let mut specs: Vec<(Vec<u64>, Vec<u64>)> = vec![(vec![0], vec![1000]), (vec![0], vec![1]), (vec![12], vec![1])];
        while specs.len() < 150 {
            let syms = rng.gen_range(1..=5);
            let n: Vec<u64> = (0..syms).map(|_| rng.gen_range(0..=6)).collect();
            let k: Vec<u64> = (0..syms).map(|_| rng.gen_range(1..=60)).collect();
            if n.iter().zip(&k).map(|(&n, &k)| k << n).sum::<u64>() <= PREFIX_OFFSET_Z_MAX {
                specs.push((n, k));
            }
        }
        for (n, k) in specs {
            families += 1;
            let syms: Vec<u64> = (0..n.len() as u64).map(|i| 3 * i + 1).collect();
            let t = PrefixOffsetTable::new(syms.clone(), n.clone(), k.iter().map(|&x| big(x)).collect(), q).unwrap();
            let z: u64 = n.iter().zip(&k).map(|(&n, &k)| k << n).sum();
            let red = t.redundancy(64).unwrap().to_f64();
            let mut ok = t.z() == &big(z) && t.k_enc() <= &big(2 * q) && red <= (1.0 + 1.0 / q as f64).log2() + 1e-12;
            let mut seen = std::collections::HashSet::new();
            for i in 0..syms.len() {
                for m in 0..(1u64 << n[i]) {
                    for kk in 0..k[i] {
                        inputs += 1;
                        let (me, ke) = t.encode(syms[i], &big(m), &big(kk)).unwrap();
                        ok &= me.bits() <= t.n_enc() && &ke < t.k_enc() && seen.insert((me.clone(), ke.clone()));
                        ok &= t.decode(&me, &ke).unwrap() == (syms[i], big(m), big(kk));
                    }
                }
            }
            if !ok {
                failures.push(format!("q={q} n={n:?} k={k:?}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{families} families with Z <= {PREFIX_OFFSET_Z_MAX}, q in {{10, 256}}, {inputs} inputs; failing: {failures:?}"),
    )
}

/// Criteria 5 and 6 over the shared corpus.
fn space_and_info(c: &Corpus) -> (Outcome, Outcome) {
    let cfg = Config::default();
    let model = InfoModel::new(c.codec.registry().clone(), cfg.t_fail(), cfg.frac_bits);
    let mut payload_fail = 0usize;
    let mut total_fail = 0usize;
    let mut min_delta: f64 = 0.0;
    let mut worst_total = f64::NEG_INFINITY;
    let mut nodes = 0usize;
    let mut violations = 0usize;
    let mut penalty_bad = 0usize;
    let mut info_delta: f64 = 0.0;
    for keys in &c.sets {
        let n = keys.len() as f64;
        let t = CTreap::from_keys(c.codec.clone(), cfg.universe, keys).unwrap();
        let s = t.space().unwrap();
        let excess = s.payload_bits - s.optimum_bits;
        min_delta = min_delta.max(excess / n);
        payload_fail += usize::from(excess > n * DELTA_SLACK + 1e-9);
        let total_excess = s.total_bits as f64 - s.optimum_bits - n * DELTA_SLACK;
        worst_total = worst_total.max(total_excess);
        total_fail += usize::from(total_excess > WORD_ALLOWANCE);

        let sub = t.root_sub();
        let em = model.encode_info(keys, sub).unwrap();
        let audit = model.audit_subproblem(sub, &em, DELTA_SLACK).unwrap();
        nodes += audit.nodes.len();
        violations += audit.violations().len();
        info_delta = info_delta.max(audit.min_feasible_delta());
        for node in &audit.nodes {
            let bad = node.rounding_loss.is_some_and(|l| l.raw() < 0)
                || node.v_penalty_bound.is_some_and(|b| b.raw() < 0)
                || node.v_divergence.is_some_and(|d| d < -1e-12);
            penalty_bad += usize::from(bad);
        }
    }
    let sets = c.sets.len();
    let c5 = outcome(
        payload_fail == 0 && total_fail == 0 && sets >= CORPUS_SETS,
        format!(
            "{sets} non-failure sets: payload over log2 C + n*{DELTA_SLACK}: {payload_fail}; minimal passing delta={min_delta:.4}; \
             total over budget+16w: {total_fail} (worst total-opt-n*delta={worst_total:.1} bits)"
        ),
    );
    let c6 = outcome(
        violations == 0 && penalty_bad == 0,
        format!("{nodes} nodes: {violations} slack violations, {penalty_bad} negative penalties; max per-key slack={info_delta:.4}"),
    );
    (c5, c6)
}

/// Criterion 7: exhaustive comparison on intervals with at most 24 keys.
fn distribution_approx() -> Outcome {
    let h = Arc::new(WeightFn::new(16, 256, 7, 1 << 20).unwrap());
    let reg = DistRegistry::new(h.clone(), Arc::new(tabtreap::numeric::GeomTable::new(8)));
    let mut delta_w: f64 = 0.0;
    let mut delta_r: f64 = 0.0;
    let mut small_mismatch = 0usize;
    let mut cases = 0usize;
    let intervals = [(0u64, 16u64), (40, 64), (1000, 1013), (65530, 65550), (4096, 4100), (777, 800)];
    for (a, b) in intervals {
        for hmax in [15u64, 11, 7] {
            let valid: Vec<u64> = (a..b).filter(|&x| h.weight(x) <= hmax).collect();
            assert!(valid.len() <= 24);
            for n in 1..=3usize {
                if valid.len() < n {
                    continue;
                }
                cases += 1;
                let mut by_weight: HashMap<u64, u64> = HashMap::new();
                let mut by_pivot_rank: HashMap<(u64, u64), u64> = HashMap::new();
                let mut by_symbol: HashMap<u64, u64> = HashMap::new();
                let mut total = 0u64;
                common::for_each_subset(0, valid.len() as u64, n, &mut |idx| {
                    let keys: Vec<u64> = idx.iter().map(|&i| valid[i as usize]).collect();
                    let ws: Vec<u64> = keys.iter().map(|&k| h.weight(k)).collect();
                    let top = *ws.iter().max().unwrap();
                    if ws.iter().filter(|&&w| w == top).count() != 1 {
                        return;
                    }
                    let r = ws.iter().position(|&w| w == top).unwrap() as u64;
                    let p = keys[r as usize];
                    *by_weight.entry(top).or_insert(0) += 1;
                    *by_pivot_rank.entry((p, r)).or_insert(0) += 1;
                    *by_symbol.entry((p - a) * n as u64 + r).or_insert(0) += 1;
                    total += 1;
                });
                if total == 0 {
                    continue;
                }
                // Weight of the pivot.
                let td = dist_weight_td(n as u64, hmax).unwrap();
                for (&w, &cnt) in &by_weight {
                    let m = td.mass(w);
                    let d = if m == big(0) {
                        f64::INFINITY
                    } else {
                        (log2_ratio(&m, &td.total()) - log2_ratio(&big(cnt), &big(total))).abs()
                    };
                    delta_w = delta_w.max(d);
                }
                // Rank of the pivot given its position.
                let mut per_pivot: HashMap<u64, u64> = HashMap::new();
                for (&(p, _), &cnt) in &by_pivot_rank {
                    *per_pivot.entry(p).or_insert(0) += cnt;
                }
                for (&(p, r), &cnt) in &by_pivot_rank {
                    let hp = h.weight(p);
                    let vl = h.count_valid(a, p, hp - u64::from(hp > 0));
                    let vr = h.count_valid(p + 1, b, hp - u64::from(hp > 0));
                    let d = reg.get(&reg.rank_td_index(n as u64, &big(vl), &big(vr))).unwrap();
                    let m = d.mass(r);
                    let dev = if m == big(0) {
                        f64::INFINITY
                    } else {
                        (log2_ratio(&m, &d.total()) - log2_ratio(&big(cnt), &big(per_pivot[&p]))).abs()
                    };
                    delta_r = delta_r.max(dev);
                }
                // The exact small-range distribution.
                let t = h.profile_of(a, b).unwrap();
                let d = reg.get(&DistRegistry::small_index(&t, n as u64, hmax)).unwrap();
                let exact = d.total() == big(total)
                    && (0..d.domain_size()).all(|s| d.mass(s) == big(by_symbol.get(&s).copied().unwrap_or(0)));
                small_mismatch += usize::from(!exact);
            }
        }
    }
    let approx = delta_w.max(delta_r);
    outcome(
        approx.is_finite() && small_mismatch == 0,
        format!(
            "{cases} cases (V <= 24, n <= 3): delta_approx={approx:.4} (weight {delta_w:.4}, rank {delta_r:.4}); DistSmall mismatches={small_mismatch}"
        ),
    )
}

fn failure_rate(w: u64, nmax: u64, sets: usize, seed: u64) -> (f64, f64) {
    let cfg = Config { weight_range: w, nmax, ..Config::default() };
    let h = WeightFn::new(w, cfg.a_count(), seed, cfg.universe).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = 0usize;
    for _ in 0..sets {
        let mut keys = std::collections::BTreeSet::new();
        while (keys.len() as u64) < nmax {
            keys.insert(rng.gen_range(0..cfg.universe));
        }
        let keys: Vec<u64> = keys.into_iter().collect();
        fails += usize::from(check_failure_predicate(&h, cfg.t_fail(), &keys).is_err());
    }
    // Independent oracle: weights behave as uniform draws from [0, W) for
    // keys in distinct subchunks, so all nmax weights must be distinct and
    // at least T_fail.
    let t = cfg.t_fail();
    let exact = 1.0 - (0..nmax).map(|i| (w - t - i) as f64 / w as f64).product::<f64>();
    (fails as f64 / sets as f64, exact)
}

/// Criterion 8: lexicographic coder, mode tracking and failure rates.
fn failure_machinery() -> Outcome {
    // Exhaustive lexicographic coding: every U <= 16, and U = 256, for n <= 4.
    let mut lex_ok = true;
    let mut lex_inputs = 0u64;
    let universes: Vec<u64> = (1..=16).chain([LEX_U_MAX]).collect();
    for &u in &universes {
        for n in 0..=LEX_N_MAX.min(u) {
            let total = binom_u64(u, n);
            lex_ok &= lex_bits(u, n) == ceil_log2(&total);
            let mut z = 0u64;
            common::for_each_subset(0, u, n as usize, &mut |keys| {
                let r = lex_rank(keys, u).unwrap();
                let mut ok = r == big(z);
                if z.is_multiple_of(97) || u <= 16 {
                    ok &= lex_unrank(&r, u, n).unwrap() == keys;
                }
                lex_ok &= ok;
                z += 1;
            });
            lex_inputs += z;
            lex_ok &= big(z) == total;
        }
    }

    // Mode follows the predicate after every update.
    let cfg = Config::default();
    let codec = Arc::new(TreapCodec::from_config(&cfg).unwrap());
    let h = codec.weight_fn().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1a9);
    let mut t = CTreap::new(codec.clone(), 1 << 12).unwrap();
    let mut keys: Vec<u64> = Vec::new();
    let mut mode_bad = 0usize;
    let mut flips = 0usize;
    for _ in 0..4000 {
        let before = t.mode();
        let trace = if keys.len() < 3 || (keys.len() < 10 && rng.gen_bool(0.5)) {
            let x = rng.gen_range(0..1u64 << 12);
            if !sorted_insert(&mut keys, x) {
                continue;
            }
            t.insert(x).unwrap()
        } else {
            let x = keys.remove(rng.gen_range(0..keys.len()));
            t.delete(x).unwrap()
        };
        let fails = check_failure_predicate(&h, cfg.t_fail(), &keys).is_err();
        let flipped = before != t.mode();
        flips += usize::from(flipped);
        mode_bad += usize::from((t.mode() == Mode::Failure) != fails || trace.mode_flip != flipped);
    }

    let (rate16, exact16) = failure_rate(16, 8, 20_000, 3);
    let (rate64, exact64) = failure_rate(64, 4, 20_000, 4);
    outcome(
        lex_ok && mode_bad == 0 && flips > 0 && rate64 <= FAILURE_RATE_W64,
        format!(
            "lex coder {lex_inputs} inputs exhaustive={lex_ok}; mode mismatches={mode_bad} over {flips} flips; \
             failure rate W=16/nmax=8: {rate16:.4} (analytic {exact16:.4}, informational); \
             W=64/nmax=4: {rate64:.4} (analytic {exact64:.4}, required <= {FAILURE_RATE_W64})"
        ),
    )
}

/// Criterion 9: depth and rebuild cost of the uncompressed treap.
fn structure() -> Outcome {
    let h = Arc::new(WeightFn::new(4096, 1 << 12, 7, 1 << 20).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    let mut detail = Vec::new();
    for n in [64usize, 256] {
        let log_n = (n as f64).log2();
        let mut max_depth = 0usize;
        let mut rebuilt = 0usize;
        for _ in 0..1000 {
            let keys = common::non_failure_set(&h, n, 0, 0, 1 << 20, &mut rng);
            let t = RefTreap::from_keys(h.clone(), &keys).unwrap();
            max_depth = max_depth.max(t.depth());
            let pick = rng.gen_range(0..n);
            let rest: Vec<u64> = keys.iter().copied().filter(|&k| k != keys[pick]).collect();
            let mut t = RefTreap::from_keys(h.clone(), &rest).unwrap();
            rebuilt += t.insert(keys[pick]).unwrap();
        }
        let mean = rebuilt as f64 / 1000.0;
        ok &= max_depth as f64 <= DEPTH_FACTOR * log_n && mean <= REBUILD_FACTOR * log_n;
        detail.push(format!(
            "n={n}: max depth {max_depth} (<= {:.0}), mean rebuilt {mean:.2} (<= {:.0})",
            DEPTH_FACTOR * log_n,
            REBUILD_FACTOR * log_n
        ));
    }
    outcome(ok, detail.join("; "))
}

/// Criterion 10: allocator footprint under random resizes.
fn allocator() -> Outcome {
    let l_bits = 1u64 << 20;
    let k = 16usize;
    let mut a = ChunkAllocator::new(l_bits, k).unwrap();
    let ids: Vec<_> = (0..k).map(|_| a.attach().unwrap()).collect();
    let mut lens = vec![0usize; k];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bound = 4.0 * a.overhead_scale();
    let cap_words = (l_bits / 64) as usize;
    let mut worst: f64 = 0.0;
    let mut violations = 0usize;
    for step in 0..ALLOC_OPS {
        let i = rng.gen_range(0..k);
        if lens[i] == 0 || (a.total_words() < cap_words && rng.gen_bool(0.52)) {
            a.grow(ids[i]).unwrap();
            lens[i] += 1;
        } else {
            a.shrink(ids[i]).unwrap();
            lens[i] -= 1;
        }
        let live = 64.0 * lens.iter().sum::<usize>() as f64;
        let over = a.footprint_bits() as f64 - live;
        worst = worst.max(over);
        violations += usize::from(over > bound);
        if step % 10_000 == 0 {
            a.check_invariants().unwrap();
        }
    }
    outcome(
        violations == 0,
        format!("{ALLOC_OPS} resizes, L=2^20, K={k}: worst overhead {worst:.0} bits, bound {bound:.0}, violations={violations}"),
    )
}

/// Criterion 11: adversarial split and merge traffic around one region.
fn block_maintenance() -> Outcome {
    let b = 8u64;
    let cfg = Config { block: Some(b), ..Config::default() };
    let keys: Vec<u64> = (0..64).map(|i| i * 4096).collect();
    let mut fid = Fid::from_sorted(&cfg, &keys).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut present: Vec<u64> = keys.clone();
    let mut wrong = 0usize;
    let mut checked = 0usize;
    let (mut splits, mut merges) = (0u64, 0u64);
    for round in 0..400 {
        // Alternate between flooding one narrow window and draining it.
        let centre = (round % 7) as u64 * 4096 * 9;
        let grow = round % 2 == 0;
        for _ in 0..24 {
            let layout = fid.block_layout();
            let stats = fid.stats;
            let (x, is_insert) = if grow || present.len() < 40 {
                let x = centre + rng.gen_range(0..4096 * 4);
                if present.binary_search(&x).is_ok() || present.len() >= 120 {
                    continue;
                }
                (x, true)
            } else {
                let lo = present.partition_point(|&k| k < centre);
                if lo >= present.len() {
                    continue;
                }
                (present[lo + rng.gen_range(0..(present.len() - lo).min(12))], false)
            };
            let blk = layout.iter().find(|(s, e, _)| (*s..*e).contains(&x)).unwrap();
            if is_insert {
                sorted_insert(&mut present, x);
                fid.insert(x).unwrap();
            } else {
                present.remove(present.binary_search(&x).unwrap());
                fid.delete(x).unwrap();
            }
            if fid.stats.rebuilds != stats.rebuilds {
                continue;
            }
            checked += 1;
            let want_split = is_insert && blk.2 == 4 * b;
            let want_merge = !is_insert && blk.2 == b && layout.len() > 1;
            wrong += usize::from((fid.stats.splits - stats.splits == 1) != want_split);
            wrong += usize::from((fid.stats.merges - stats.merges == 1) != want_merge);
            splits += fid.stats.splits - stats.splits;
            merges += fid.stats.merges - stats.merges;
            if fid.check_invariants(false).is_err() {
                wrong += 1;
            }
        }
    }
    let ok = wrong == 0 && splits > 0 && merges > 0 && fid.stats.max_merged <= 5 * b;
    outcome(
        ok,
        format!(
            "{checked} ops: splits={splits} merges={merges} resplits={} max merged={} (<= {}), threshold mismatches={wrong}",
            fid.stats.resplits,
            fid.stats.max_merged,
            5 * b
        ),
    )
}

fn main() {
    let corpus = corpus();
    let (r12, r3, r4, r56, r7, r8, r9, r10, r11) = std::thread::scope(|s| {
        let h12 = s.spawn(oracle_and_canonicity);
        let h8 = s.spawn(failure_machinery);
        let h3 = s.spawn(|| encoder_redundancy(&corpus));
        let h56 = s.spawn(|| space_and_info(&corpus));
        let h4 = s.spawn(prefix_offset_core);
        let h7 = s.spawn(distribution_approx);
        let h9 = s.spawn(structure);
        let h10 = s.spawn(allocator);
        let h11 = s.spawn(block_maintenance);
        (
            h12.join().unwrap(),
            h3.join().unwrap(),
            h4.join().unwrap(),
            h56.join().unwrap(),
            h7.join().unwrap(),
            h8.join().unwrap(),
            h9.join().unwrap(),
            h10.join().unwrap(),
            h11.join().unwrap(),
        )
    });
    let rows = [
        ("oracle equivalence", r12.0),
        ("canonicity", r12.1),
        ("encoder redundancy", r3),
        ("prefix-offset core", r4),
        ("top-level space", r56.0),
        ("info-model audit", r56.1),
        ("distribution approximation", r7),
        ("failure machinery", r8),
        ("structural statistics", r9),
        ("allocator bound", r10),
        ("block maintenance", r11),
    ];
    let mut passed = 0;
    for (i, (name, o)) in rows.iter().enumerate() {
        println!("criterion {:>2} {name}: {} | {}", i + 1, if o.ok { "PASS" } else { "FAIL" }, o.detail);
        passed += usize::from(o.ok);
    }
    println!("acceptance: {passed}/{} criteria pass", rows.len());
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") && passed != rows.len() {
        std::process::exit(1);
    }
}
