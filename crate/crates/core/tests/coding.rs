use std::collections::HashSet;
use std::sync::Arc;

use num_bigint::BigUint;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtreap::coding::{
    perturb, DistSource, EncKey, EncoderParams, EntropyEncoder, InputSize, PrefixOffsetTable, SizeFn, UniformEncoder,
};
use tabtreap::info::{DistIndex, Distribution, Family, Prob};
use tabtreap::numeric::{log2_cost, BitCost, Rounding};
use tabtreap::vm::{SpillPair, VirtualMemory};
use tabtreap::Error;

const FRAC: u32 = 64;

fn big(x: u64) -> BigUint {
    BigUint::from(x)
}

#[test]
fn prefix_offset_thousand_with_q_ten() {
    let t = PrefixOffsetTable::new(vec![0], vec![0], vec![big(1000)], 10).unwrap();
    assert_eq!((t.n_enc(), t.k_enc().clone()), (6, big(16)));
    let red = t.redundancy(FRAC).unwrap().to_f64();
    assert!((red - (10.0 - 1000f64.log2())).abs() < 1e-9);
    assert!(red <= 4.0 / 10.0 && red <= (1.1f64).log2() + 1e-12);
    let mut seen = HashSet::new();
    for k in 0..1000u64 {
        let (m, ke) = t.encode(0, &big(0), &big(k)).unwrap();
        assert!(m.bits() <= 6 && ke < big(16));
        assert!(seen.insert((m.clone(), ke.clone())));
        assert_eq!(t.decode(&m, &ke).unwrap(), (0, big(0), big(k)));
    }
    // Code values at or above Z are rejected.
    assert!(matches!(t.decode(&big(63), &big(15)), Err(Error::Corruption(_))));
}

#[test]
fn prefix_offset_degenerate() {
    let t = PrefixOffsetTable::new(vec![7], vec![0], vec![big(1)], 256).unwrap();
    assert_eq!((t.z().clone(), t.n_enc(), t.k_enc().clone()), (big(1), 0, big(1)));
    assert_eq!(t.encode(7, &big(0), &big(0)).unwrap(), (big(0), big(0)));
    assert!(t.encode(6, &big(0), &big(0)).is_err());
}

fn prefix_offset_exhaustive(n: [u64; 3], k: [u64; 3], q: u64) {
    let syms = vec![2, 5, 11];
    let t = PrefixOffsetTable::new(syms.clone(), n.to_vec(), k.iter().map(|&x| big(x)).collect(), q).unwrap();
    let z: u64 = (0..3).map(|i| k[i] << n[i]).sum();
    assert_eq!(t.z(), &big(z));
    assert!(t.k_enc() <= &big(2 * q) && t.k_enc() >= &big(1));
    assert!(t.redundancy(FRAC).unwrap().to_f64() <= (1.0 + 1.0 / q as f64).log2() + 1e-12);
    let mut seen = HashSet::new();
    for i in 0..3 {
        for m in 0..(1u64 << n[i]) {
            for kk in 0..k[i] {
                let (me, ke) = t.encode(syms[i], &big(m), &big(kk)).unwrap();
                assert!(me.bits() <= t.n_enc() && &ke < t.k_enc());
                assert!(seen.insert((me.clone(), ke.clone())));
                assert_eq!(t.decode(&me, &ke).unwrap(), (syms[i], big(m), big(kk)));
            }
        }
    }
    assert_eq!(seen.len() as u64, z);
}

#[test]
fn prefix_offset_three_symbol_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for q in [10u64, 256] {
        let mut done = 0;
        while done < 40 {
            let n = [rng.gen_range(0..6), rng.gen_range(0..6), rng.gen_range(0..6)];
            let k = [rng.gen_range(1..70), rng.gen_range(1..70), rng.gen_range(1..70)];
            let z: u64 = (0..3).map(|i| k[i] << n[i]).sum();
            if z > 4096 {
                continue;
            }
            prefix_offset_exhaustive(n, k, q);
            done += 1;
        }
    }
}

/// A tabulated test distribution keyed by `params[0]`.
#[derive(Debug)]
struct Tab {
    index: DistIndex,
    masses: Vec<u64>,
}

impl Distribution for Tab {
    fn index(&self) -> &DistIndex {
        &self.index
    }
    fn domain_size(&self) -> u64 {
        self.masses.len() as u64
    }
    fn mass(&self, sym: u64) -> BigUint {
        big(self.masses.get(sym as usize).copied().unwrap_or(0))
    }
    fn total(&self) -> BigUint {
        big(self.masses.iter().sum())
    }
}

/// Eight members over four symbols; member `j` has its own pmf and sizes.
struct TestFamily;

fn member_masses(j: u64) -> Vec<u64> {
    match j % 4 {
        0 => vec![1, 1, 1, 1],
        1 => vec![8, 4, 2, 2],
        2 => vec![1, 0, 6, 1],
        _ => vec![5, 1, 1, 9],
    }
}

fn member_size(j: u64, sym: u64) -> InputSize {
    // Later members keep longer memories so the fixed prefix is nonempty.
    let m = ((j + sym) % 3) as usize + (j / 2) as usize;
    let k = 1 + (j * 7 + sym * 13) % 40;
    InputSize::new(m, big(k))
}

fn key(j: u64) -> EncKey {
    EncKey::new(DistIndex { family: Family::WeightTd, params: vec![j] })
}

impl DistSource for TestFamily {
    fn dist(&self, idx: &DistIndex) -> tabtreap::Result<Arc<dyn Distribution>> {
        Ok(Arc::new(Tab { index: idx.clone(), masses: member_masses(idx.params[0]) }))
    }
}

impl SizeFn for TestFamily {
    fn input_size(&self, key: &EncKey, sym: u64) -> tabtreap::Result<InputSize> {
        Ok(member_size(key.dist.params[0], sym))
    }
}

fn encoder(q: u64) -> EntropyEncoder {
    let params = EncoderParams { q, kin_bits_max: 6, supp_max: 4, frac: FRAC, cap: 1 << 10 };
    EntropyEncoder::new(Arc::new(TestFamily), Arc::new(TestFamily), params).unwrap()
}

fn support(j: u64) -> Vec<u64> {
    member_masses(j).iter().enumerate().filter(|(_, &m)| m > 0).map(|(s, _)| s as u64).collect()
}

fn random_input(j: u64, sym: u64, rng: &mut ChaCha8Rng) -> SpillPair {
    let sz = member_size(j, sym);
    let words = (0..sz.m).map(|_| rng.gen()).collect();
    let k = rng.gen_range(0..sz.k.to_u64_digits().first().copied().unwrap_or(1));
    SpillPair::new(VirtualMemory::from_words(words), big(k), sz.k).unwrap()
}

#[test]
fn beta_follows_formula() {
    let e = encoder(16);
    // 4 (6 + 5 + 3 + 10) = 96 bits -> 2 words.
    assert_eq!(e.beta(), 2);
    let p = EncoderParams { q: 256, kin_bits_max: 256, supp_max: 9, frac: FRAC, cap: 1 };
    assert_eq!(p.beta(), (4 * (256 + 9 + 4 + 10) as u64).div_ceil(64) as usize);
}

#[test]
fn general_encoder_exhaustive_over_spills() {
    let e = encoder(16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for j in 0..8 {
        let out_size = e.output_size(&key(j)).unwrap();
        let m_max = support(j).iter().map(|&s| member_size(j, s).m).max().unwrap();
        assert_eq!(out_size.m, m_max.saturating_sub(e.beta()));
        for sym in support(j) {
            let sz = member_size(j, sym);
            let kmax = sz.k.to_u64_digits()[0];
            for k in 0..kmax {
                let words: Vec<u64> = (0..sz.m).map(|_| rng.gen()).collect();
                let input = SpillPair::new(VirtualMemory::from_words(words), big(k), sz.k.clone()).unwrap();
                let out = e.encode(&key(j), sym, &input).unwrap();
                assert_eq!(InputSize::of(&out), out_size);
                assert_eq!(e.decode(&key(j), &out).unwrap(), (sym, input.clone()));
                assert_eq!(e.read_symbol(&key(j), &out).unwrap(), sym);
                for i in 0..sz.m {
                    assert_eq!(e.read_word(&key(j), &out, i).unwrap().0, input.vm.words()[i]);
                }
                // Idempotence of read-then-re-encode.
                let (s2, in2) = e.decode(&key(j), &out).unwrap();
                assert_eq!(e.encode(&key(j), s2, &in2).unwrap(), out);
            }
        }
        // Symbols outside the support and mismatched sizes are rejected.
        if j % 4 == 2 {
            let bad = random_input(j, 0, &mut rng);
            assert!(e.encode(&key(j), 1, &bad).is_err());
        }
        let mut wrong = random_input(j, support(j)[0], &mut rng);
        wrong.vm.allocate();
        assert!(e.encode(&key(j), support(j)[0], &wrong).is_err());
    }
}

#[test]
fn exact_space_audit_per_member() {
    for q in [16u64, 256] {
        let e = encoder(q);
        let bound = e.excess_bound();
        for j in 0..8 {
            let a = e.audit(&key(j)).unwrap();
            assert!(a.excess <= bound, "member {j} q {q}: {} > {}", a.excess, bound);
            let ulp = BitCost::ulp(FRAC);
            assert!(a.log2_z <= a.h_short + ulp, "prefix-offset bound for member {j}");
            let k_enc = e.table(&key(j)).unwrap().prefix.k_enc().clone();
            assert!(k_enc >= big(1) && k_enc <= big(2 * q));
        }
    }
}

#[test]
fn perturbation_bounds() {
    for q in [16u64, 256] {
        for j in 0..4 {
            let masses = member_masses(j);
            let total: u64 = masses.iter().sum();
            let supp = masses.iter().filter(|&&m| m > 0).count() as u64;
            let mut sum = Prob { num: big(0), den: big(1) };
            for &m in masses.iter().filter(|&&m| m > 0) {
                let p = Prob { num: big(m), den: big(total) };
                let pt = perturb(&p, q, supp);
                let d = pt.cost(Rounding::Up, FRAC).unwrap() - p.cost(Rounding::Down, FRAC).unwrap();
                assert!(d.to_f64() <= 1.0 / q as f64 * (1.0 + 1e-9));
                let cap = log2_cost(&big(2 * q * supp), Rounding::Up, FRAC).unwrap();
                assert!(pt.cost(Rounding::Down, FRAC).unwrap() <= cap);
                sum = Prob { num: &sum.num * &pt.den + &pt.num * &sum.den, den: &sum.den * &pt.den };
            }
            assert_eq!(sum.num, sum.den);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Shadow {
    j: u64,
    sym: u64,
    words: Vec<u64>,
    k: u64,
}

fn shadow_pair(s: &Shadow) -> SpillPair {
    let sz = member_size(s.j, s.sym);
    SpillPair::new(VirtualMemory::from_words(s.words.clone()), big(s.k), sz.k).unwrap()
}

#[test]
fn access_and_change_fuzz_against_shadow() {
    let e = encoder(16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sym0 = support(0)[0];
    let input0 = random_input(0, sym0, &mut rng);
    let mut s = Shadow { j: 0, sym: sym0, words: input0.vm.words().to_vec(), k: input0.k.to_u64_digits().first().copied().unwrap_or(0) };
    let mut out = e.encode(&key(0), sym0, &input0).unwrap();
    let mut max_c = 0.0f64;
    for step in 0..10_000 {
        let m = s.words.len();
        match rng.gen_range(0..6) {
            0 => assert_eq!(e.read_symbol(&key(s.j), &out).unwrap(), s.sym),
            1 if m > 0 => {
                let i = rng.gen_range(0..m);
                assert_eq!(e.read_word(&key(s.j), &out, i).unwrap().0, s.words[i]);
            }
            2 if m > 0 => {
                let i = rng.gen_range(0..m);
                let v = rng.gen();
                let ops = e.write_word(&key(s.j), &mut out, i, v).unwrap();
                assert!(ops.word_ops() + ops.spill_writes == 1);
                s.words[i] = v;
            }
            3 => assert_eq!(e.read_spill(&key(s.j), &out).unwrap(), big(s.k)),
            4 => {
                let kmax = member_size(s.j, s.sym).k.to_u64_digits()[0];
                s.k = rng.gen_range(0..kmax);
                e.write_spill(&key(s.j), &mut out, big(s.k)).unwrap();
            }
            _ => {
                let j2 = rng.gen_range(0..8);
                let sup = support(j2);
                let sym2 = sup[rng.gen_range(0..sup.len())];
                let sz2 = member_size(j2, sym2);
                let k2 = rng.gen_range(0..sz2.k.to_u64_digits()[0]);
                let before = e.output_size(&key(s.j)).unwrap().m as i64;
                let after = e.output_size(&key(j2)).unwrap().m as i64;
                let ops = e.change(&key(s.j), &mut out, &key(j2), sym2, big(k2)).unwrap();
                let dm = (after - before).unsigned_abs();
                assert_eq!(ops.allocs + ops.releases, dm);
                assert_eq!(ops.spill_writes, 1);
                max_c = max_c.max(ops.word_ops() as f64 / (1 + dm) as f64);
                s.words.resize(sz2.m, 0);
                s = Shadow { j: j2, sym: sym2, words: s.words.clone(), k: k2 };
            }
        }
        if step % 7 == 0 {
            assert_eq!(e.decode(&key(s.j), &out).unwrap(), (s.sym, shadow_pair(&s)));
            // Deterministic re-encode: the state is canonical.
            assert_eq!(e.encode(&key(s.j), s.sym, &shadow_pair(&s)).unwrap(), out);
        }
    }
    assert!(max_c <= 2.0, "change constant {max_c}");
}

#[test]
fn change_to_same_state_is_free() {
    let e = encoder(16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random_input(5, 1, &mut rng);
    let mut out = e.encode(&key(5), 1, &input).unwrap();
    let before = out.clone();
    let ops = e.change(&key(5), &mut out, &key(5), 1, input.k.clone()).unwrap();
    assert_eq!(ops.allocs + ops.releases + ops.writes + ops.pad_writes, 0);
    assert_eq!(out, before);
}

#[test]
fn change_growing_output_by_two_words() {
    // Find pairs of members whose outputs differ by exactly two words.
    let e = encoder(16);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut found = false;
    for a in 0..8 {
        for b in 0..8 {
            let ma = e.output_size(&key(a)).unwrap().m;
            let mb = e.output_size(&key(b)).unwrap().m;
            if mb != ma + 2 {
                continue;
            }
            let sa = support(a)[0];
            let input = random_input(a, sa, &mut rng);
            let mut out = e.encode(&key(a), sa, &input).unwrap();
            let sb = support(b)[0];
            let ops = e.change(&key(a), &mut out, &key(b), sb, big(0)).unwrap();
            assert_eq!((ops.allocs, ops.releases), (2, 0));
            let (sym, got) = e.decode(&key(b), &out).unwrap();
            assert_eq!(sym, sb);
            let keep = input.vm.len().min(got.vm.len());
            assert_eq!(&got.vm.words()[..keep], &input.vm.words()[..keep]);
            found = true;
        }
    }
    assert!(found);
}

#[test]
fn uniform_small_branch() {
    let u = UniformEncoder::new(8, FRAC);
    assert_eq!(u.beta(), 2);
    let h = BitCost::from_f64(10.5, FRAC, Rounding::Up);
    let s = u.shape(h).unwrap();
    assert_eq!((s.m_max, s.k_max.clone(), s.small), (0, big(1448), true));
    let s = u.shape(BitCost::from_int(300, FRAC)).unwrap();
    assert_eq!((s.m_max, s.k_max.clone(), s.small), (2, BigUint::from(1u32) << 172u32, false));
    assert!(u.excess(0, 16, BitCost::from_int(300, FRAC)).unwrap().to_f64() <= 1.0 / 256.0);
    assert!(u.excess(3, 4, h).unwrap().to_f64() <= 1.0 / 256.0);
}

fn uniform_size(sym: u64) -> InputSize {
    InputSize::new(2 + (sym % 3) as usize, big(1 + sym % 5))
}

#[test]
fn uniform_exhaustive_round_trip() {
    let u = UniformEncoder::new(8, FRAC);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = BitCost::from_int(300, FRAC);
    let out_size = u.output_size(100, 116, h).unwrap();
    for sym in 100..116 {
        let sz = uniform_size(sym);
        for k in 0..sz.k.to_u64_digits()[0] {
            let words = (0..sz.m).map(|_| rng.gen()).collect();
            let input = SpillPair::new(VirtualMemory::from_words(words), big(k), sz.k.clone()).unwrap();
            let out = u.encode(100, 116, h, sym, &input).unwrap();
            assert_eq!(InputSize::of(&out), out_size);
            assert_eq!(u.read_symbol(100, 116, h, &out).unwrap(), sym);
            assert_eq!(u.decode(100, 116, h, &out, |s| Ok(uniform_size(s))).unwrap(), (sym, input));
        }
    }
    // Symbol index convention: k_out = index * K_max + k_adj.
    let input = SpillPair::new(VirtualMemory::from_words(vec![0, 0]), big(0), big(1)).unwrap();
    let out = u.encode(100, 116, h, 103, &input).unwrap();
    assert_eq!(out.k, big(3) * (BigUint::from(1u32) << 172u32));
}

#[test]
fn uniform_single_symbol_and_violations() {
    let u = UniformEncoder::new(8, FRAC);
    let h = BitCost::from_int(40, FRAC);
    let input = SpillPair::new(VirtualMemory::new(), big(77), big(1000)).unwrap();
    let out = u.encode(5, 6, h, 5, &input).unwrap();
    assert_eq!(out.vm.len(), 0);
    assert_eq!(out.k, big(77));
    assert_eq!(u.decode(5, 6, h, &out, |_| Ok(InputSize::new(0, big(1000)))).unwrap(), (5, input.clone()));
    assert!(u.encode(5, 6, h, 6, &input).is_err());
    // Condition 4: M_max above M_in is a configuration error.
    let big_h = BitCost::from_int(300, FRAC);
    assert!(matches!(u.encode(0, 2, big_h, 0, &input), Err(Error::Config(_))));
    // An input larger than H_max is a capacity violation.
    let wide = SpillPair::new(VirtualMemory::from_words(vec![1]), big(0), big(2)).unwrap();
    assert!(matches!(u.encode(0, 2, h, 0, &wide), Err(Error::CapacityViolation(_))));
}

proptest! {
    #[test]
    fn prefix_offset_random_round_trip(
        sizes in proptest::collection::vec((0u64..40, 1u64..1_000_000), 1..6),
        pick in any::<u64>(),
        m in any::<u64>(),
        k in any::<u64>(),
        q in 2u64..300,
    ) {
        let syms: Vec<u64> = (0..sizes.len() as u64).map(|i| 3 * i + 1).collect();
        let t = PrefixOffsetTable::new(
            syms.clone(),
            sizes.iter().map(|s| s.0).collect(),
            sizes.iter().map(|s| big(s.1)).collect(),
            q,
        ).unwrap();
        let i = (pick % sizes.len() as u64) as usize;
        let m = if sizes[i].0 == 0 { 0 } else { m >> (64 - sizes[i].0) };
        let k = k % sizes[i].1;
        let (me, ke) = t.encode(syms[i], &big(m), &big(k)).unwrap();
        prop_assert_eq!(t.decode(&me, &ke).unwrap(), (syms[i], big(m), big(k)));
        prop_assert!(t.k_enc() <= &big(2 * q));
        prop_assert!(t.redundancy(FRAC).unwrap().to_f64() <= (1.0 + 1.0 / q as f64).log2() + 1e-12);
    }
}
