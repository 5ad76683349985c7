//! `audit`: measured bits against the information-theoretic optimum.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtreap::ctreap::{CTreap, Mode, TreapCodec};
use tabtreap::fid::Fid;
use tabtreap::info::{check_failure_predicate, InfoModel};
use tabtreap::Config;

use crate::report::Report;
use crate::snapshot::read_keys;

#[derive(Args)]
pub struct AuditArgs {
    /// Number of random sets.
    #[arg(long, default_value_t = 1000)]
    pub sets: usize,
    /// Keys per random set; defaults to nmax.
    #[arg(long)]
    pub n: Option<u64>,
    /// Audit the dictionary built from this key file instead (one key per line, `-` for stdin).
    #[arg(long)]
    pub keys: Option<PathBuf>,
}

pub fn run(cfg: &Config, args: &AuditArgs) -> Result<Report> {
    match &args.keys {
        Some(path) => audit_file(cfg, path),
        None => audit_random(cfg, args.sets, args.n.unwrap_or(cfg.nmax)),
    }
}

fn audit_file(cfg: &Config, path: &std::path::Path) -> Result<Report> {
    let mut keys = read_keys(path)?;
    keys.sort_unstable();
    keys.dedup();
    let fid = Fid::from_sorted(cfg, &keys)?;
    let space = fid.space_report()?;
    let mut r = Report::new("audit", cfg);
    r.absorb("space", &space.to_kv());
    r.check("superadditivity", space.superadditivity_margin() >= -1e-9);
    r.check("allocator_bound", space.allocator_overhead_bits as f64 <= space.allocator_bound_bits);
    r.check("canonical", fid.check_invariants(true).is_ok());
    Ok(r)
}

/// Random `n`-sets of `[0, U)`: failure rate over all trials, then space and
/// info-model audits over the sets that pass the failure predicate.
pub fn audit_random(cfg: &Config, sets: usize, n: u64) -> Result<Report> {
    let codec = Arc::new(TreapCodec::from_config(cfg)?);
    let model = InfoModel::new(codec.registry().clone(), cfg.t_fail(), cfg.frac_bits);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut r = Report::new("audit", cfg);
    r.put("sets", sets);
    r.put("n", n);
    if n > cfg.universe {
        anyhow::bail!("n = {n} exceeds U = {}", cfg.universe);
    }

    let mut failures = 0usize;
    let mut payload_ok = 0usize;
    let mut total_ok = 0usize;
    let mut min_delta: f64 = 0.0;
    let mut max_redundancy = f64::NEG_INFINITY;
    let mut info_violations = 0usize;
    let mut info_min_delta: f64 = 0.0;
    let mut penalties_ok = true;
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    let mut optimum_sum = 0.0;
    let mut payload_sum = 0.0;
    let budget = n as f64 * cfg.delta_slack;
    let word_budget = 16.0 * 64.0;

    for _ in 0..sets {
        let mut set = BTreeSet::new();
        while (set.len() as u64) < n {
            set.insert(rng.gen_range(0..cfg.universe));
        }
        let keys: Vec<u64> = set.into_iter().collect();
        if check_failure_predicate(codec.weight_fn(), cfg.t_fail(), &keys).is_err() {
            failures += 1;
            continue;
        }
        let t = CTreap::from_keys(codec.clone(), cfg.universe, &keys)?;
        debug_assert_eq!(t.mode(), Mode::Normal);
        let s = t.space()?;
        let excess = s.payload_bits - s.optimum_bits;
        optimum_sum += s.optimum_bits;
        payload_sum += s.payload_bits;
        max_redundancy = max_redundancy.max(excess);
        if n > 0 {
            min_delta = min_delta.max(excess / n as f64);
        }
        payload_ok += usize::from(excess <= budget + 1e-9);
        total_ok += usize::from(s.total_bits as f64 <= s.optimum_bits + budget + word_budget);

        let sub = t.root_sub();
        let emissions = model.encode_info(&keys, sub)?;
        let audit = model.audit_subproblem(sub, &emissions, cfg.delta_slack)?;
        info_violations += audit.violations().len();
        info_min_delta = info_min_delta.max(audit.min_feasible_delta());
        for node in &audit.nodes {
            penalties_ok &= node.rounding_loss.is_none_or(|l| l.raw() >= 0);
            penalties_ok &= node.v_penalty_bound.is_none_or(|b| b.raw() >= 0);
        }
        for (bin, c) in audit.slack_histogram(0.1) {
            *hist.entry(bin).or_insert(0) += c;
        }
    }

    let audited = sets - failures;
    r.put("failure_sets", failures);
    r.put_f("failure_rate", if sets == 0 { 0.0 } else { failures as f64 / sets as f64 });
    r.put("audited_sets", audited);
    r.put_f("optimum_bits_mean", if audited == 0 { 0.0 } else { optimum_sum / audited as f64 });
    r.put_f("payload_bits_mean", if audited == 0 { 0.0 } else { payload_sum / audited as f64 });
    r.put_f("max_redundancy_bits", if audited == 0 { 0.0 } else { max_redundancy });
    r.put("payload_within_budget", format!("{payload_ok}/{audited}"));
    r.put_f("min_passing_delta", min_delta);
    r.put("total_within_budget", format!("{total_ok}/{audited}"));
    r.put("info.node_violations", info_violations);
    r.put_f("info.min_feasible_delta", info_min_delta);
    for (bin, c) in hist {
        r.put(format!("info.slack_hist[{:.1}]", bin as f64 * 0.1), c);
    }
    r.check("payload", payload_ok == audited);
    r.check("total", total_ok == audited);
    r.check("info_model", info_violations == 0);
    r.check("penalties_nonnegative", penalties_ok);
    Ok(r)
}
