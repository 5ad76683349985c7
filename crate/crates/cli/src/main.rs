//! Command-line driver: space audits, oracle fuzzing, benchmarks and
//! snapshot encode/decode for the tabtreap dictionary.

mod audit;
mod bench;
mod fuzz;
mod report;
mod selftest;
mod snapshot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tabtreap::Config;

#[derive(Parser)]
#[command(name = "tabtreap", version, about = "Succinct dynamic dictionary: audit, fuzz, bench")]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    cmd: Command,
}

/// Configuration sources, applied in order: defaults, `--config` file,
/// `--set` overrides, then the per-field flags.
#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long = "U", global = true)]
    universe: Option<String>,
    #[arg(long, global = true)]
    nmax: Option<String>,
    #[arg(long = "W", global = true)]
    weight_range: Option<String>,
    #[arg(long = "A_count", global = true)]
    a_count: Option<String>,
    #[arg(long, global = true)]
    q: Option<String>,
    #[arg(long = "delta_slack", global = true)]
    delta_slack: Option<String>,
    #[arg(long = "delta_mid", global = true)]
    delta_mid: Option<String>,
    #[arg(long = "delta_H", global = true)]
    delta_h: Option<String>,
    #[arg(long = "T_fail", global = true)]
    t_fail: Option<String>,
    #[arg(long = "B", global = true)]
    block: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long = "F", global = true)]
    frac_bits: Option<String>,
    #[arg(long = "c_spill", global = true)]
    c_spill: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Config::from_kv_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Config::default(),
        };
        for s in &self.set {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("U", &self.universe),
            ("nmax", &self.nmax),
            ("W", &self.weight_range),
            ("A_count", &self.a_count),
            ("q", &self.q),
            ("delta_slack", &self.delta_slack),
            ("delta_mid", &self.delta_mid),
            ("delta_H", &self.delta_h),
            ("T_fail", &self.t_fail),
            ("B", &self.block),
            ("seed", &self.seed),
            ("F", &self.frac_bits),
            ("c_spill", &self.c_spill),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Measure space against log2 C(U, n) on random treap-sized sets or a key file.
    Audit(audit::AuditArgs),
    /// Random operations against a sorted-set oracle with canonicity checks.
    Fuzz(fuzz::FuzzArgs),
    /// Throughput and instrumentation counters over a doubling sweep of n.
    Bench(bench::BenchArgs),
    /// Build a dictionary from a key file and write its snapshot.
    Encode(snapshot::EncodeArgs),
    /// Read a snapshot and print its keys.
    Decode(snapshot::DecodeArgs),
    /// Quick end-to-end checks of every layer.
    Selftest(selftest::SelftestArgs),
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let cfg = cli.cfg.resolve()?;
    let report = match cli.cmd {
        Command::Audit(a) => audit::run(&cfg, &a)?,
        Command::Fuzz(a) => fuzz::run(&cfg, &a)?,
        Command::Bench(a) => bench::run(&cfg, &a)?,
        Command::Encode(a) => snapshot::encode(&cfg, &a)?,
        Command::Decode(a) => snapshot::decode(&cfg, &a)?,
        Command::Selftest(a) => selftest::run(&cfg, &a)?,
    };
    print!("{}", report.render());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
