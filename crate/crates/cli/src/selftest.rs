//! `selftest`: a few minutes' worth of end-to-end checks in a few seconds.

use anyhow::Result;
use clap::Args;
use tabtreap::ctreap::{lex_bits, lex_rank, lex_unrank};
use tabtreap::numeric::{binom_u64, ceil_log2};
use tabtreap::Config;

use crate::audit::audit_random;
use crate::fuzz::{generate, replay};
use crate::report::Report;

#[derive(Args)]
pub struct SelftestArgs {
    /// Operations in the fuzz stage.
    #[arg(long, default_value_t = 20_000)]
    pub ops: usize,
}

pub fn run(cfg: &Config, args: &SelftestArgs) -> Result<Report> {
    let mut r = Report::new("selftest", cfg);

    let mut lex_ok = true;
    for u in 1..=16u64 {
        for n in 0..=4.min(u) {
            let total: u64 = binom_u64(u, n).try_into().unwrap_or(u64::MAX);
            lex_ok &= lex_bits(u, n) == ceil_log2(&binom_u64(u, n));
            for z in 0..total {
                let keys = lex_unrank(&z.into(), u, n)?;
                lex_ok &= lex_rank(&keys, u)? == z.into();
            }
        }
    }
    r.check("lex_coder", lex_ok);

    let ops = generate(cfg, args.ops, None);
    let fuzz = replay(cfg, &ops, 1000);
    if let Err(d) = &fuzz {
        r.put("fuzz.divergence", format!("step {}: {}", d.step, d.message));
    }
    r.check("fuzz", fuzz.is_ok());

    // Fault right before a check must be caught by that check.
    let faulty = generate(cfg, 2000, Some(998));
    r.check("fault_detected", replay(cfg, &faulty, 1000).is_err());

    let audit = audit_random(cfg, 50, cfg.nmax)?;
    r.check("audit", audit.passed());
    Ok(r)
}
