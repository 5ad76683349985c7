use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtreap::fid::{default_block, Fid};
use tabtreap::numeric::binom_u64;
use tabtreap::{Config, Error};

fn cfg_with(universe: u64, block: Option<u64>) -> Config {
    Config { universe, block, ..Config::default() }
}

fn check_against(fid: &Fid, oracle: &BTreeSet<u64>, probes: &[u64]) {
    let keys: Vec<u64> = oracle.iter().copied().collect();
    assert_eq!(fid.len(), keys.len() as u64);
    assert_eq!(fid.keys().unwrap(), keys);
    for (i, &k) in keys.iter().enumerate() {
        assert_eq!(fid.select(i as u64).unwrap(), k);
    }
    for &x in probes {
        assert_eq!(fid.rank(x).unwrap(), keys.partition_point(|&k| k < x) as u64, "rank({x})");
        assert_eq!(fid.contains(x).unwrap(), oracle.contains(&x));
    }
}

/// Runs `ops` random operations; `insert_tenths` of them are inserts.
fn random_workload(cfg: &Config, ops: usize, insert_tenths: u32, seed: u64, check_every: usize) -> Fid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fid = Fid::new(cfg).unwrap();
    let mut oracle = BTreeSet::new();
    for step in 0..ops {
        let roll = rng.gen_range(0..10u32);
        if roll < insert_tenths || oracle.is_empty() {
            let x = rng.gen_range(0..cfg.universe);
            let res = fid.insert(x);
            if oracle.insert(x) {
                res.unwrap();
            } else {
                assert!(matches!(res, Err(Error::Precondition(_))));
            }
        } else if roll < 9 {
            let i = rng.gen_range(0..oracle.len());
            let x = *oracle.iter().nth(i).unwrap();
            fid.delete(x).unwrap();
            oracle.remove(&x);
        } else {
            let x = rng.gen_range(0..cfg.universe);
            assert_eq!(fid.rank(x).unwrap(), oracle.range(..x).count() as u64);
        }
        if step % check_every == 0 {
            fid.check_invariants(true).unwrap();
        }
    }
    fid.check_invariants(true).unwrap();
    let probes: Vec<u64> = (0..200).map(|_| rng.gen_range(0..cfg.universe)).collect();
    check_against(&fid, &oracle, &probes);
    fid
}

#[test]
fn default_block_rule() {
    assert_eq!(default_block(0), 8);
    assert_eq!(default_block(1 << 20), 8);
    // (log2 n / 6)^(1/3) > 2 once log2 n > 48.
    assert_eq!(default_block(1 << 50), 8);
    assert_eq!(default_block(u64::MAX), 8);
}

#[test]
fn empty_dictionary() {
    let cfg = Config::default();
    let fid = Fid::new(&cfg).unwrap();
    assert!(fid.is_empty());
    assert_eq!(fid.block_count(), 1);
    assert_eq!(fid.rank(0).unwrap(), 0);
    assert_eq!(fid.rank(cfg.universe - 1).unwrap(), 0);
    assert!(!fid.contains(5).unwrap());
    assert!(matches!(fid.select(0), Err(Error::Domain(_))));
    fid.check_invariants(true).unwrap();
    let back = Fid::load(&cfg, &fid.snapshot()).unwrap();
    assert!(back.is_empty());
}

#[test]
fn universe_boundaries() {
    let cfg = cfg_with(64, None);
    let mut fid = Fid::new(&cfg).unwrap();
    fid.insert(0).unwrap();
    fid.insert(63).unwrap();
    assert!(matches!(fid.insert(64), Err(Error::Domain(_))));
    assert!(matches!(fid.delete(64), Err(Error::Precondition(_))));
    assert_eq!(fid.rank(63).unwrap(), 1);
    assert_eq!(fid.rank(64).unwrap(), 2);
    assert_eq!(fid.select(1).unwrap(), 63);
    // Fill the whole universe, then drain it.
    for x in 1..63 {
        fid.insert(x).unwrap();
        fid.check_invariants(true).unwrap();
    }
    assert_eq!(fid.len(), 64);
    for x in 0..64 {
        assert_eq!(fid.rank(x).unwrap(), x);
        assert_eq!(fid.select(x).unwrap(), x);
    }
    for x in (0..64).rev() {
        fid.delete(x).unwrap();
        fid.check_invariants(true).unwrap();
    }
    assert!(fid.is_empty());
}

#[test]
fn bulk_load_matches_incremental() {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set: BTreeSet<u64> = (0..5000).map(|_| rng.gen_range(0..cfg.universe)).collect();
    let keys: Vec<u64> = set.iter().copied().collect();
    let fid = Fid::from_sorted(&cfg, &keys).unwrap();
    fid.check_invariants(true).unwrap();
    for (_, _, size) in fid.block_layout() {
        assert!((2 * fid.block_param()..4 * fid.block_param()).contains(&size));
    }
    check_against(&fid, &set, &keys[..100]);
    assert!(matches!(Fid::from_sorted(&cfg, &[3, 3]), Err(Error::Precondition(_))));
    assert!(matches!(Fid::from_sorted(&cfg, &[cfg.universe]), Err(Error::Precondition(_))));
}

#[test]
fn split_and_merge_thresholds() {
    let cfg = cfg_with(1 << 20, Some(8));
    // 64 keys spaced 1000 apart give four blocks of 16 and the regime [32, 128].
    let keys: Vec<u64> = (0..64).map(|i| i * 1000).collect();
    let mut fid = Fid::from_sorted(&cfg, &keys).unwrap();
    assert_eq!(fid.block_layout().iter().map(|b| b.2).collect::<Vec<_>>(), vec![16; 4]);
    let first_end = fid.block_layout()[0].1;

    // Block 0 grows to 32 = 4B without splitting, and splits at 33.
    for x in 1..=16 {
        fid.insert(x).unwrap();
    }
    assert_eq!(fid.stats.splits, 0);
    assert_eq!(fid.block_layout()[0].2, 32);
    fid.insert(17).unwrap();
    assert_eq!(fid.stats.splits, 1);
    let layout = fid.block_layout();
    assert_eq!((layout[0].2, layout[1].2), (16, 17));
    assert_eq!(layout[1].1, first_end);
    fid.check_invariants(true).unwrap();

    // The last block shrinks to B = 8 without merging, and merges at 7.
    let last: Vec<u64> = fid.keys().unwrap().into_iter().rev().take(9).collect();
    for &x in &last[..8] {
        fid.delete(x).unwrap();
    }
    assert_eq!(fid.stats.merges, 0);
    assert_eq!(fid.block_layout().last().unwrap().2, 8);
    fid.delete(last[8]).unwrap();
    assert_eq!(fid.stats.merges, 1);
    assert_eq!(fid.stats.max_merged, 7 + 16);
    fid.check_invariants(true).unwrap();
    assert_eq!(fid.stats.rebuilds, 0);
}

#[test]
fn merge_above_four_b_splits_again() {
    let cfg = cfg_with(1 << 20, Some(8));
    let keys: Vec<u64> = (0..64).map(|i| i * 1000).collect();
    let mut fid = Fid::from_sorted(&cfg, &keys).unwrap();
    // Grow the third block to 30 keys, then drain the last block below B.
    let third_start = fid.block_layout()[2].0;
    for x in 1..=14 {
        fid.insert(third_start + x).unwrap();
    }
    let last: Vec<u64> = fid.keys().unwrap().into_iter().rev().take(9).collect();
    for &x in &last {
        fid.delete(x).unwrap();
    }
    assert_eq!(fid.stats.merges, 1);
    assert_eq!(fid.stats.resplits, 1);
    assert_eq!(fid.stats.max_merged, 37);
    let sizes: Vec<u64> = fid.block_layout().iter().map(|b| b.2).collect();
    assert_eq!(sizes, vec![16, 16, 18, 19]);
    fid.check_invariants(true).unwrap();
}

#[test]
fn regime_rebuilds_track_n() {
    let cfg = Config::default();
    let mut fid = Fid::new(&cfg).unwrap();
    for x in 0..200u64 {
        fid.insert(x * 37).unwrap();
    }
    let grown = fid.stats.rebuilds;
    assert!(grown >= 3, "rebuilds after growth: {grown}");
    for x in 0..190u64 {
        fid.delete(x * 37).unwrap();
    }
    assert!(fid.stats.rebuilds > grown);
    fid.check_invariants(true).unwrap();
    assert_eq!(fid.keys().unwrap(), (190..200).map(|x| x * 37).collect::<Vec<_>>());
}

#[test]
fn random_workload_sparse() {
    let fid = random_workload(&Config::default(), 6000, 6, 11, 250);
    assert!(fid.stats.splits > 0);
}

#[test]
fn random_workload_dense() {
    let fid = random_workload(&cfg_with(4096, None), 8000, 5, 12, 250);
    assert!(fid.stats.splits > 0 && fid.stats.merges > 0);
}

#[test]
fn random_workload_wide_weights() {
    let cfg = Config { weight_range: 64, ..Config::default() };
    random_workload(&cfg, 3000, 6, 13, 250);
}

#[test]
fn snapshot_round_trip_and_rejects() {
    let cfg = Config::default();
    let fid = random_workload(&cfg, 3000, 6, 21, 1000);
    let bytes = fid.snapshot();
    let back = Fid::load(&cfg, &bytes).unwrap();
    assert_eq!(back.keys().unwrap(), fid.keys().unwrap());
    assert_eq!(back.block_layout(), fid.block_layout());
    assert_eq!(back.snapshot(), bytes);

    let other = Config { seed: 2, ..cfg.clone() };
    assert!(matches!(Fid::load(&other, &bytes), Err(Error::Config(_))));
    assert!(Fid::load(&cfg, &bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Fid::load(&cfg, &extra).is_err());
    let mut damaged = bytes.clone();
    let last = damaged.len() - 9;
    damaged[last] ^= 0x55;
    assert!(Fid::load(&cfg, &damaged).map(|f| f.keys().unwrap() != fid.keys().unwrap()).unwrap_or(true));
}

#[test]
fn space_report_is_consistent() {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set: BTreeSet<u64> = (0..20000).map(|_| rng.gen_range(0..cfg.universe)).collect();
    let keys: Vec<u64> = set.iter().copied().collect();
    let fid = Fid::from_sorted(&cfg, &keys).unwrap();
    let r = fid.space_report().unwrap();
    let opt = binom_u64(cfg.universe, keys.len() as u64).bits() as f64;
    assert!((r.optimum_bits - opt).abs() <= 1.0);
    assert!(r.superadditivity_margin() >= 0.0);
    assert!(r.payload_bits >= r.block_optimum_bits - 1e-6);
    assert!(r.total_bits >= r.payload_bits);
    assert!((r.allocator_overhead_bits as f64) <= r.allocator_bound_bits);
    assert_eq!(r.blocks, fid.block_count());
    assert!(r.to_kv().contains("redundancy_bits = "));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ops_match_a_sorted_set(ops in prop::collection::vec((0u8..3, 0u64..512), 1..400)) {
        let cfg = cfg_with(512, None);
        let mut fid = Fid::new(&cfg).unwrap();
        let mut oracle = BTreeSet::new();
        for (op, x) in ops {
            match op {
                0 => prop_assert_eq!(fid.insert(x).is_ok(), oracle.insert(x)),
                1 => prop_assert_eq!(fid.delete(x).is_ok(), oracle.remove(&x)),
                _ => prop_assert_eq!(fid.rank(x).unwrap(), oracle.range(..x).count() as u64),
            }
        }
        fid.check_invariants(true).unwrap();
        prop_assert_eq!(fid.keys().unwrap(), oracle.into_iter().collect::<Vec<_>>());
    }
}
